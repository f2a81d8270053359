//! Run reports: a per-activity account of one instance built from its event
//! log and the simulator's billing ledger.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::engine::{ActivityState, EventKind, InstanceStatus};
use crate::money::Money;
use crate::provenance::records_to_events;
use crate::runtime::{Runtime, RuntimeError};
use crate::sched::PlacementDecision;
use crate::sim::CostScope;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub t: u64,
    pub state: ActivityState,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivityReport {
    pub activity_id: String,
    pub kind: &'static str,
    pub role: String,
    pub state: ActivityState,
    pub timeline: Vec<TimelineEntry>,
    pub placements: Vec<PlacementDecision>,
    /// Instance count of every elastic round, in order.
    pub attempts: Vec<u32>,
    pub decision_label: Option<String>,
    pub cost: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VmReport {
    pub vm_id: String,
    pub cloud_id: String,
    pub machine_type: String,
    pub activity_id: String,
    pub attempt: u32,
    pub running_seconds: u64,
    pub billed_hours: u64,
    pub cost: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub instance_id: String,
    pub model_id: String,
    pub status: InstanceStatus,
    pub sim_time_s: u64,
    pub event_count: usize,
    pub activities: Vec<ActivityReport>,
    pub vms: Vec<VmReport>,
    pub cost_per_cloud: BTreeMap<String, Money>,
    pub total_cost: Money,
}

pub fn export_report(runtime: &Runtime, instance_id: &str) -> Result<Report, RuntimeError> {
    let instance = runtime.instance(instance_id)?;
    let events = records_to_events(runtime.records_of(instance_id))?;

    let mut activities: BTreeMap<&str, ActivityReport> = BTreeMap::new();
    for activity in &instance.model.activities {
        let rt = &instance.activity_states[&activity.activity_id];
        activities.insert(
            &activity.activity_id,
            ActivityReport {
                activity_id: activity.activity_id.clone(),
                kind: activity.kind.label(),
                role: activity.role_id.clone(),
                state: rt.state,
                timeline: vec![TimelineEntry {
                    t: events.first().map_or(0, |e| e.sim_time_s),
                    state: ActivityState::Pending,
                }],
                placements: Vec::new(),
                attempts: Vec::new(),
                decision_label: rt.decision_label.clone(),
                cost: Money::ZERO,
            },
        );
    }

    for event in &events {
        let Some(report) = event.kind.activity_id().and_then(|id| activities.get_mut(id)) else {
            continue;
        };
        let t = event.sim_time_s;
        let mut push = |state| report.timeline.push(TimelineEntry { t, state });
        match &event.kind {
            EventKind::BecameReady { awaiting_human, .. } => {
                push(ActivityState::Ready);
                if *awaiting_human {
                    push(ActivityState::AwaitingHuman);
                }
            }
            EventKind::Dispatched { placement, .. } => {
                push(ActivityState::Scheduled);
                report.attempts.push(placement.instance_count);
                report.placements.push(placement.clone());
            }
            EventKind::Rescaled { placement, .. } => {
                push(ActivityState::Scheduled);
                report.attempts.push(placement.instance_count);
                report.placements.push(placement.clone());
            }
            EventKind::Started { .. } => push(ActivityState::Running),
            EventKind::HumanCompleted { .. } | EventKind::TaskCompleted { .. } => {
                push(ActivityState::Completed)
            }
            EventKind::TimedOut { .. } => push(ActivityState::TimedOut),
            EventKind::Skipped { .. } => push(ActivityState::Skipped),
            EventKind::Failed { .. } => push(ActivityState::Failed),
            EventKind::Instantiated { .. } | EventKind::InstanceCompleted {} => {}
        }
    }

    let now = runtime.now_s();
    let mut vms = Vec::new();
    let mut cost_per_cloud: BTreeMap<String, Money> = BTreeMap::new();
    for vm in runtime.sim().instances() {
        let Some(owner) = vm.owner.as_ref().filter(|o| o.instance_id == instance_id) else {
            continue;
        };
        let cost = vm.cost(now);
        let running_seconds = vm.running_seconds(now);
        *cost_per_cloud.entry(vm.cloud_id.clone()).or_insert(Money::ZERO) += cost;
        if let Some(a) = activities.get_mut(owner.activity_id.as_str()) {
            a.cost += cost;
        }
        vms.push(VmReport {
            vm_id: vm.vm_id.clone(),
            cloud_id: vm.cloud_id.clone(),
            machine_type: vm.machine_type.clone(),
            activity_id: owner.activity_id.clone(),
            attempt: owner.attempt,
            running_seconds,
            billed_hours: running_seconds.div_ceil(3600),
            cost,
        });
    }
    let total_cost = runtime.cost(CostScope::Process(instance_id));
    debug_assert_eq!(total_cost, cost_per_cloud.values().copied().sum::<Money>());

    Ok(Report {
        instance_id: instance_id.to_string(),
        model_id: instance.model.model_id.clone(),
        status: instance.status,
        sim_time_s: instance.sim_time_s,
        event_count: events.len(),
        activities: activities.into_values().collect(),
        vms,
        cost_per_cloud,
        total_cost,
    })
}
