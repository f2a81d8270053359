//! Cost-minimizing placement of automated activities and the elastic
//! scale-up-on-timeout controller.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Activity, ElasticityPolicy, ScalingType};
use crate::money::Money;
use crate::sim::{task_duration, CloudKind, CloudSpec, TaskProfile};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("activity `{0}` is not timed out")]
    IllegalState(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementDecision {
    pub activity_id: String,
    pub cloud_id: String,
    pub machine_type: String,
    pub instance_count: u32,
    pub estimated_duration_s: u64,
    pub estimated_cost: Money,
}

/// A ready automated activity awaiting placement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadyTask {
    pub activity: Activity,
    /// Set when the activity or any artifact it touches is confidential.
    pub confidential: bool,
    pub profile: TaskProfile,
    /// Elastic round index; 0 for the first placement.
    pub attempt: u32,
}

/// A cloud together with its currently uncommitted cpus (`None` = unbounded).
#[derive(Debug, Clone, PartialEq)]
pub struct CloudCapacity {
    pub spec: CloudSpec,
    pub free_cpus: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulingProblem {
    pub ready: Vec<ReadyTask>,
    pub clouds: Vec<CloudCapacity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Placement {
    Placed(PlacementDecision),
    Deferred,
}

impl Placement {
    pub fn decision(&self) -> Option<&PlacementDecision> {
        match self {
            Placement::Placed(d) => Some(d),
            Placement::Deferred => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Count(u32),
    Exhausted,
}

fn uncapped_count(policy: &ElasticityPolicy, attempt_k: u32) -> u64 {
    let n0 = policy.initial_instances as u64;
    match policy.scaling_type {
        ScalingType::Exponential => {
            n0.saturating_mul(1u64.checked_shl(attempt_k).unwrap_or(u64::MAX))
        }
        ScalingType::Linear => n0.saturating_mul(attempt_k as u64 + 1),
    }
}

/// Instance count for elastic round `attempt_k`.
///
/// Exponential doubles per round, linear adds `initial_instances` per round;
/// both are capped at `max_instances`. Rounds at or past `max_rounds`, and
/// rounds following one whose uncapped count already reached the cap, are
/// exhausted.
pub fn next_scale(policy: &ElasticityPolicy, attempt_k: u32) -> Scale {
    if attempt_k >= policy.max_rounds {
        return Scale::Exhausted;
    }
    let cap = policy.max_instances as u64;
    if attempt_k > 0 && uncapped_count(policy, attempt_k - 1) >= cap {
        return Scale::Exhausted;
    }
    Scale::Count(uncapped_count(policy, attempt_k).min(cap) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum TimeoutDirective {
    Rescale {
        attempt: u32,
        new_count: u32,
        new_timeout_s: u64,
    },
    Fail,
}

/// Reaction to a timed-out elastic round `attempt_k`.
pub fn on_timeout(
    activity_id: &str,
    timed_out: bool,
    policy: Option<&ElasticityPolicy>,
    attempt_k: u32,
) -> Result<TimeoutDirective, SchedError> {
    if !timed_out {
        return Err(SchedError::IllegalState(activity_id.to_string()));
    }
    let Some(policy) = policy else {
        return Ok(TimeoutDirective::Fail);
    };
    Ok(match next_scale(policy, attempt_k + 1) {
        Scale::Exhausted => TimeoutDirective::Fail,
        Scale::Count(new_count) => TimeoutDirective::Rescale {
            attempt: attempt_k + 1,
            new_count,
            new_timeout_s: policy.timeout_s(),
        },
    })
}

fn estimated_cost(count: u32, duration_s: u64, price_per_hour: Money) -> Money {
    price_per_hour * (count as u64 * duration_s.div_ceil(3600))
}

/// Orders candidates by cost, then duration, then `(cloud_id, machine_type)`.
pub fn candidate_order(a: &PlacementDecision, b: &PlacementDecision) -> Ordering {
    a.estimated_cost
        .cmp(&b.estimated_cost)
        .then(a.estimated_duration_s.cmp(&b.estimated_duration_s))
        .then_with(|| a.cloud_id.cmp(&b.cloud_id))
        .then_with(|| a.machine_type.cmp(&b.machine_type))
}

/// Every placement of `task` that honours confidentiality, demand, capacity
/// and deadline, cheapest first.
pub fn feasible_options(task: &ReadyTask, clouds: &[CloudCapacity]) -> Vec<PlacementDecision> {
    let activity = &task.activity;
    let (count, only_type) = match &activity.elasticity {
        Some(policy) => match next_scale(policy, task.attempt) {
            Scale::Count(n) => (n, Some(policy.machine_type.as_str())),
            Scale::Exhausted => return Vec::new(),
        },
        None => (1, None),
    };
    let duration = task_duration(&task.profile, count);
    if let Some(hours) = activity.deadline_hours {
        if duration as f64 > hours * 3600.0 {
            return Vec::new();
        }
    }

    let mut out = Vec::new();
    for cloud in clouds {
        if task.confidential && cloud.spec.kind != CloudKind::Private {
            continue;
        }
        for machine in &cloud.spec.catalog {
            if only_type.is_some_and(|t| t != machine.name) {
                continue;
            }
            if let Some(d) = &activity.demand {
                if (machine.cpus as u64) * (count as u64) < d.cpus as u64
                    || machine.memory_gb < d.memory_gb
                {
                    continue;
                }
            }
            if let Some(free) = cloud.free_cpus {
                if (machine.cpus as u64) * (count as u64) > free as u64 {
                    continue;
                }
            }
            out.push(PlacementDecision {
                activity_id: activity.activity_id.clone(),
                cloud_id: cloud.spec.cloud_id.clone(),
                machine_type: machine.name.clone(),
                instance_count: count,
                estimated_duration_s: duration,
                estimated_cost: estimated_cost(count, duration, machine.price_per_hour),
            });
        }
    }
    out.sort_by(candidate_order);
    out
}

/// Order in which ready tasks claim capacity: earliest deadline first, tasks
/// without a deadline last, ties by activity id.
pub fn edf_order(a: &ReadyTask, b: &ReadyTask) -> Ordering {
    match (a.activity.deadline_hours, b.activity.deadline_hours) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.activity.activity_id.cmp(&b.activity.activity_id))
}

/// Upper bound on the number of joint assignments searched exactly.
pub const EXACT_SEARCH_LIMIT: u64 = 20_000;

/// Places ready tasks at minimum total cost.
///
/// Tasks are first placed greedily: in EDF order each takes its cheapest
/// feasible candidate and the chosen cpus are deducted from that cloud's free
/// capacity. When the joint assignment space has at most
/// [`EXACT_SEARCH_LIMIT`] points, a branch-and-bound search over it replaces
/// the greedy plan if it places every task and either the greedy plan
/// deferred some task or the search found a strictly cheaper total.
pub fn plan_placements(problem: &SchedulingProblem) -> BTreeMap<String, Placement> {
    let greedy = greedy_placements(problem);
    let Some(exact) = exact_placements(problem) else {
        return greedy;
    };
    let placed = greedy.values().filter(|p| p.decision().is_some()).count();
    let greedy_cost: Money = greedy
        .values()
        .filter_map(|p| p.decision().map(|d| d.estimated_cost))
        .sum();
    let exact_cost: Money = exact
        .values()
        .filter_map(|p| p.decision().map(|d| d.estimated_cost))
        .sum();
    if placed < problem.ready.len() || exact_cost < greedy_cost {
        exact
    } else {
        greedy
    }
}

fn greedy_placements(problem: &SchedulingProblem) -> BTreeMap<String, Placement> {
    let mut clouds = problem.clouds.clone();
    let mut order: Vec<&ReadyTask> = problem.ready.iter().collect();
    order.sort_by(|a, b| edf_order(a, b));

    let mut plan = BTreeMap::new();
    for task in order {
        let choice = feasible_options(task, &clouds).into_iter().next();
        let placement = match choice {
            Some(decision) => {
                let cloud = clouds
                    .iter_mut()
                    .find(|c| c.spec.cloud_id == decision.cloud_id)
                    .expect("candidate cloud comes from the problem");
                if let Some(free) = cloud.free_cpus.as_mut() {
                    *free -= footprint(&cloud.spec, &decision);
                }
                Placement::Placed(decision)
            }
            None => Placement::Deferred,
        };
        plan.insert(task.activity.activity_id.clone(), placement);
    }
    plan
}

fn footprint(spec: &CloudSpec, decision: &PlacementDecision) -> u32 {
    spec.machine(&decision.machine_type).map_or(0, |m| m.cpus) * decision.instance_count
}

/// Cheapest assignment placing every task within joint capacity, if the
/// search space is small enough and such an assignment exists.
fn exact_placements(problem: &SchedulingProblem) -> Option<BTreeMap<String, Placement>> {
    let unbounded: Vec<CloudCapacity> = problem
        .clouds
        .iter()
        .map(|c| CloudCapacity {
            spec: c.spec.clone(),
            free_cpus: None,
        })
        .collect();
    let mut order: Vec<&ReadyTask> = problem.ready.iter().collect();
    order.sort_by(|a, b| edf_order(a, b));
    let mut options = Vec::with_capacity(order.len());
    let mut space: u64 = 1;
    for task in &order {
        let candidates: Vec<(usize, u32, PlacementDecision)> = feasible_options(task, &unbounded)
            .into_iter()
            .map(|d| {
                let cloud = unbounded
                    .iter()
                    .position(|c| c.spec.cloud_id == d.cloud_id)
                    .expect("candidate cloud comes from the problem");
                (cloud, footprint(&unbounded[cloud].spec, &d), d)
            })
            .collect();
        space = space.saturating_mul(candidates.len() as u64);
        if space == 0 || space > EXACT_SEARCH_LIMIT {
            return None;
        }
        options.push(candidates);
    }

    struct Search<'a> {
        options: &'a [Vec<(usize, u32, PlacementDecision)>],
        free: Vec<Option<u32>>,
        chosen: Vec<usize>,
        best: Option<(Money, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, cost: Money) {
            if self.best.as_ref().is_some_and(|(b, _)| cost >= *b) {
                return;
            }
            if i == self.options.len() {
                self.best = Some((cost, self.chosen.clone()));
                return;
            }
            for (j, (cloud, cpus, d)) in self.options[i].iter().enumerate() {
                let before = self.free[*cloud];
                match before {
                    Some(f) if f < *cpus => continue,
                    Some(f) => self.free[*cloud] = Some(f - cpus),
                    None => {}
                }
                self.chosen.push(j);
                self.go(i + 1, cost + d.estimated_cost);
                self.chosen.pop();
                self.free[*cloud] = before;
            }
        }
    }
    let mut search = Search {
        options: &options,
        free: problem.clouds.iter().map(|c| c.free_cpus).collect(),
        chosen: Vec::new(),
        best: None,
    };
    search.go(0, Money::ZERO);
    let (_, chosen) = search.best?;
    Some(
        order
            .iter()
            .zip(chosen)
            .enumerate()
            .map(|(i, (task, j))| {
                (
                    task.activity.activity_id.clone(),
                    Placement::Placed(options[i][j].2.clone()),
                )
            })
            .collect(),
    )
}
