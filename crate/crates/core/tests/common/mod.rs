#![allow(dead_code)]

pub mod api;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use procforge::model::{
    parse_process, Activity, ActivityKind, ArtifactSpec, Edge, ElasticityPolicy, ProcessModel,
    ResourceDemand, Role, ScalingType,
};
use procforge::money::Money;
use procforge::sched::{CloudCapacity, ReadyTask, SchedulingProblem};
use procforge::sim::{parse_topology, CloudKind, CloudSpec, MachineType, TaskProfile};
use procforge::Runtime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sample_model() -> ProcessModel {
    parse_process(procforge::SAMPLE_MODEL).unwrap()
}

pub fn sample_topology() -> Vec<CloudSpec> {
    parse_topology(procforge::SAMPLE_TOPOLOGY).unwrap()
}

/// The profile that makes round 0 of the sample's model-check time out at
/// 2 instances (5500 s > 1 h) and round 1 succeed at 4 instances (3250 s).
pub fn elastic_profile() -> TaskProfile {
    TaskProfile {
        base_duration_s: 10_000,
        serial_fraction: 0.1,
        sync_overhead_s_per_node: 0.0,
    }
}

pub fn externals(model: &ProcessModel) -> BTreeSet<String> {
    model.external_artifacts()
}

pub fn activity(id: &str, kind: ActivityKind, role: &str) -> Activity {
    Activity {
        activity_id: id.to_string(),
        kind,
        role_id: role.to_string(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        confidential: false,
        demand: None,
        elasticity: None,
        deadline_hours: None,
    }
}

pub fn artifact(id: &str, confidential: bool, external: bool) -> ArtifactSpec {
    ArtifactSpec {
        artifact_id: id.to_string(),
        name: id.to_string(),
        confidential,
        external,
    }
}

pub fn edge(from: &str, to: &str, guard: Option<&str>) -> Edge {
    Edge {
        from_activity: from.to_string(),
        to_activity: to.to_string(),
        guard: guard.map(str::to_string),
    }
}

/// A random valid, acyclic model. Activity `aJ` only has edges from `aI`
/// with `I < J`, every activity outputs `oJ`, inputs come from direct
/// predecessors, and manual activities with several successors are
/// decision points whose outgoing edges are all guarded.
pub fn random_model(rng: &mut ChaCha8Rng, model_id: &str) -> ProcessModel {
    let n = rng.gen_range(1..=8);
    let roles = vec![
        Role {
            role_id: "qa".into(),
            name: "QA".into(),
        },
        Role {
            role_id: "dev".into(),
            name: "Dev".into(),
        },
    ];
    let mut artifacts = vec![artifact("ext", rng.gen_bool(0.1), true)];
    let mut activities = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();
    for j in 0..n {
        let id = format!("a{j}");
        let manual = rng.gen_bool(0.3);
        let kind = if manual {
            ActivityKind::Manual
        } else {
            ActivityKind::Automated
        };
        let role = if rng.gen_bool(0.5) { "qa" } else { "dev" };
        let mut a = activity(&id, kind, role);
        let out = format!("o{j}");
        artifacts.push(artifact(&out, rng.gen_bool(0.15), false));
        a.outputs.push(out);
        if j > 0 && rng.gen_bool(0.85) {
            let k = rng.gen_range(1..=2.min(j));
            let mut preds: Vec<usize> = (0..j).collect();
            preds.shuffle(rng);
            for &p in preds.iter().take(k) {
                edges.push(edge(&format!("a{p}"), &id, None));
                if rng.gen_bool(0.5) {
                    a.inputs.push(format!("o{p}"));
                }
            }
        }
        if a.inputs.is_empty() && rng.gen_bool(0.4) {
            a.inputs.push("ext".into());
        }
        if !manual {
            a.confidential = rng.gen_bool(0.1);
            let cpus = *[1u32, 1, 2, 4].choose(rng).unwrap();
            a.demand = Some(ResourceDemand {
                cpus,
                memory_gb: *[1.0, 2.0, 4.0].choose(rng).unwrap(),
            });
            if rng.gen_bool(0.35) {
                let initial = rng.gen_range(1..=3);
                a.elasticity = Some(ElasticityPolicy {
                    machine_type: (*["small", "medium", "large"].choose(rng).unwrap()).into(),
                    initial_instances: initial,
                    timeout_hours: *[0.5, 1.0].choose(rng).unwrap(),
                    scaling_type: if rng.gen_bool(0.5) {
                        ScalingType::Exponential
                    } else {
                        ScalingType::Linear
                    },
                    max_rounds: rng.gen_range(1..=3),
                    max_instances: rng.gen_range(initial..=8),
                });
                a.demand = Some(ResourceDemand {
                    cpus: 1,
                    memory_gb: 1.0,
                });
            }
            if rng.gen_bool(0.1) {
                a.deadline_hours = Some(*[1.0, 4.0].choose(rng).unwrap());
            }
        }
        activities.push(a);
    }
    for a in activities.iter().filter(|a| a.is_manual()) {
        let out: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.from_activity == a.activity_id)
            .map(|(i, _)| i)
            .collect();
        if out.len() >= 2 || (out.len() == 1 && rng.gen_bool(0.3)) {
            for (k, i) in out.into_iter().enumerate() {
                edges[i].guard = Some(format!("g{k}"));
            }
        }
    }
    // only keep the external artifact when someone reads it
    if !activities.iter().any(|a| a.inputs.iter().any(|i| i == "ext")) {
        artifacts.remove(0);
    }
    ProcessModel {
        model_id: model_id.into(),
        name: format!("random {model_id}"),
        roles,
        artifacts,
        activities,
        edges,
    }
}

pub fn random_profiles(rng: &mut ChaCha8Rng, model: &ProcessModel) -> BTreeMap<String, TaskProfile> {
    model
        .activities
        .iter()
        .filter(|a| a.is_automated())
        .map(|a| {
            (
                a.activity_id.clone(),
                TaskProfile {
                    base_duration_s: rng.gen_range(60..=12_000),
                    serial_fraction: rng.gen_range(0..=5) as f64 / 10.0,
                    sync_overhead_s_per_node: rng.gen_range(0..=60) as f64,
                },
            )
        })
        .collect()
}

/// One seeded run: two random models, up to three instances, humans that
/// answer after random delays with random decision labels. Returns the
/// runtime after every instance has gone quiet.
pub fn simulate(seed: u64, data_dir: Option<&Path>) -> Runtime {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = match data_dir {
        Some(dir) => Runtime::persistent(sample_topology(), dir).unwrap(),
        None => Runtime::in_memory(sample_topology()),
    };
    rt.set_tracing(true);
    let models: Vec<ProcessModel> = (0..2).map(|i| random_model(&mut rng, &format!("m{i}"))).collect();
    for m in &models {
        rt.register_model(m.clone()).unwrap();
    }
    let mut ids = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let m = models.choose(&mut rng).unwrap();
        let profiles = random_profiles(&mut rng, m);
        ids.push(rt.create_instance(&m.model_id, &externals(m), profiles).unwrap());
        if rng.gen_bool(0.5) {
            let t = rt.now_s() + rng.gen_range(0..2000);
            rt.advance_to(t).unwrap();
        }
    }
    for _ in 0..100 {
        rt.run_until_quiescent().unwrap();
        let mut items = rt.worklist(None, None);
        if items.is_empty() {
            break;
        }
        items.shuffle(&mut rng);
        let item = &items[0];
        if rng.gen_bool(0.5) {
            let t = rt.now_s() + rng.gen_range(1..5000);
            rt.advance_to(t).unwrap();
        }
        let label = item.guard_options.choose(&mut rng).cloned();
        rt.complete_task(&item.instance_id, &item.activity_id, &item.role, label.as_deref())
            .unwrap();
    }
    rt
}

fn machine(name: &str, cpus: u32, price: f64) -> MachineType {
    MachineType {
        name: name.into(),
        cpus,
        memory_gb: cpus as f64 * 2.0,
        price_per_hour: Money::from_units(price),
    }
}

/// A random scheduling problem over up to three clouds with per-cloud prices.
pub fn random_problem(rng: &mut ChaCha8Rng) -> SchedulingProblem {
    let types = [("small", 1, 0.05), ("medium", 2, 0.10), ("large", 4, 0.20)];
    let n_clouds = rng.gen_range(1..=3);
    let mut clouds = Vec::new();
    for c in 0..n_clouds {
        let private = rng.gen_bool(0.5);
        let factor = *[0.5, 1.0, 1.5].choose(rng).unwrap();
        let catalog = types
            .iter()
            .filter(|_| rng.gen_bool(0.8))
            .map(|(n, cpus, p)| machine(n, *cpus, p * factor))
            .collect::<Vec<_>>();
        let catalog = if catalog.is_empty() {
            vec![machine("small", 1, 0.05 * factor)]
        } else {
            catalog
        };
        let capacity = private.then(|| rng.gen_range(2..=12));
        clouds.push(CloudCapacity {
            spec: CloudSpec {
                cloud_id: format!("c{c}"),
                kind: if private {
                    CloudKind::Private
                } else {
                    CloudKind::Public
                },
                capacity_cpus: capacity,
                provisioning_latency_s: 120,
                catalog,
            },
            free_cpus: capacity.map(|c| rng.gen_range(0..=c)),
        });
    }
    let ready = (0..rng.gen_range(1..=6))
        .map(|i| {
            let mut a = activity(&format!("t{i}"), ActivityKind::Automated, "dev");
            a.confidential = rng.gen_bool(0.4);
            a.demand = Some(ResourceDemand {
                cpus: rng.gen_range(1..=4),
                memory_gb: *[1.0, 2.0, 4.0, 8.0].choose(rng).unwrap(),
            });
            if rng.gen_bool(0.3) {
                let initial = rng.gen_range(1..=3);
                a.elasticity = Some(ElasticityPolicy {
                    machine_type: (*["small", "medium", "large"].choose(rng).unwrap()).into(),
                    initial_instances: initial,
                    timeout_hours: 1.0,
                    scaling_type: ScalingType::Exponential,
                    max_rounds: 3,
                    max_instances: 8,
                });
            }
            if rng.gen_bool(0.3) {
                a.deadline_hours = Some(rng.gen_range(1..=4) as f64);
            }
            ReadyTask {
                confidential: a.confidential,
                activity: a,
                profile: TaskProfile {
                    base_duration_s: rng.gen_range(600..=9000),
                    serial_fraction: 0.2,
                    sync_overhead_s_per_node: 10.0,
                },
                attempt: rng.gen_range(0..=2),
            }
        })
        .collect();
    SchedulingProblem { ready, clouds }
}

/// Minimum total estimated cost over joint assignments that place every
/// task without overcommitting any private cloud; `None` if none exists.
pub fn oracle_min_cost(problem: &SchedulingProblem) -> Option<Money> {
    let unconstrained: Vec<CloudCapacity> = problem
        .clouds
        .iter()
        .map(|c| CloudCapacity {
            spec: c.spec.clone(),
            free_cpus: None,
        })
        .collect();
    // candidates ignoring capacity; capacity is accounted jointly in `search`
    let options: Vec<Vec<(String, u32, Money)>> = problem
        .ready
        .iter()
        .map(|t| {
            procforge::sched::feasible_options(t, &unconstrained)
                .into_iter()
                .map(|d| {
                    let cpus = unconstrained
                        .iter()
                        .find(|c| c.spec.cloud_id == d.cloud_id)
                        .and_then(|c| c.spec.machine(&d.machine_type))
                        .map_or(0, |m| m.cpus);
                    (d.cloud_id, cpus * d.instance_count, d.estimated_cost)
                })
                .collect()
        })
        .collect();
    let mut free: BTreeMap<String, Option<u32>> = problem
        .clouds
        .iter()
        .map(|c| (c.spec.cloud_id.clone(), c.free_cpus))
        .collect();
    let mut best = None;
    search(&options, 0, &mut free, Money::ZERO, &mut best);
    best
}

fn search(
    options: &[Vec<(String, u32, Money)>],
    i: usize,
    free: &mut BTreeMap<String, Option<u32>>,
    cost: Money,
    best: &mut Option<Money>,
) {
    if i == options.len() {
        if best.is_none_or(|b| cost < b) {
            *best = Some(cost);
        }
        return;
    }
    for (cloud, cpus, c) in &options[i] {
        match free[cloud] {
            Some(f) if f < *cpus => continue,
            Some(f) => {
                free.insert(cloud.clone(), Some(f - cpus));
                search(options, i + 1, free, cost + *c, best);
                free.insert(cloud.clone(), Some(f));
            }
            None => search(options, i + 1, free, cost + *c, best),
        }
    }
}

/// True when no private cloud can run short: the largest private
/// footprint of every task, summed, fits each private cloud's free cpus.
pub fn capacity_uncoupled(problem: &SchedulingProblem) -> bool {
    problem.clouds.iter().all(|cloud| {
        let Some(free) = cloud.free_cpus else {
            return true;
        };
        let unbounded = [CloudCapacity {
            spec: cloud.spec.clone(),
            free_cpus: None,
        }];
        let demand: u32 = problem
            .ready
            .iter()
            .map(|t| {
                procforge::sched::feasible_options(t, &unbounded)
                    .iter()
                    .map(|d| cloud.spec.machine(&d.machine_type).unwrap().cpus * d.instance_count)
                    .max()
                    .unwrap_or(0)
            })
            .sum();
        demand <= free
    })
}
