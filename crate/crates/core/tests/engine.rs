mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{activity, artifact, edge};
use procforge::engine::{EnactmentError, InstanceStatus};
use procforge::model::{ActivityKind, ProcessModel, Role};
use procforge::provenance::records_to_events;
use procforge::{ActivityState, ProcessInstance, Runtime};
use proptest::prelude::*;

/// Whether `to` is reachable from `from` in at most two lifecycle steps.
fn legal(from: ActivityState, to: ActivityState) -> bool {
    from.can_become(to)
        || ActivityState::ALL
            .iter()
            .any(|&mid| from.can_become(mid) && mid.can_become(to))
}

fn states(instance: &ProcessInstance) -> BTreeMap<String, ActivityState> {
    instance
        .activity_states
        .iter()
        .map(|(k, v)| (k.clone(), v.state))
        .collect()
}

#[test]
fn lifecycle_relation() {
    use ActivityState::*;
    for s in ActivityState::ALL {
        if s.is_terminal() {
            assert!(ActivityState::ALL.iter().all(|&t| !s.can_become(t)), "{s} is not absorbing");
        }
        assert!(!s.can_become(s));
    }
    assert!(TimedOut.can_become(Scheduled));
    assert!(!AwaitingHuman.can_become(Failed));
    assert!(!Pending.can_become(Running));
}

/// `start -> d`, then `d -[a]-> p` producing `x`, `d -[b]-> q -> r`, and `r`
/// needs `x`.
fn dead_input_model() -> ProcessModel {
    let mut start = activity("start", ActivityKind::Manual, "qa");
    start.inputs = vec!["in".into()];
    start.outputs = vec!["s".into()];
    let mut d = activity("d", ActivityKind::Manual, "qa");
    d.inputs = vec!["s".into()];
    let mut p = activity("p", ActivityKind::Manual, "qa");
    p.outputs = vec!["x".into()];
    let q = activity("q", ActivityKind::Manual, "qa");
    let mut r = activity("r", ActivityKind::Manual, "qa");
    r.inputs = vec!["x".into()];
    ProcessModel {
        model_id: "dead".into(),
        name: "dead".into(),
        roles: vec![Role {
            role_id: "qa".into(),
            name: "qa".into(),
        }],
        artifacts: vec![
            artifact("in", false, true),
            artifact("s", false, false),
            artifact("x", false, false),
        ],
        activities: vec![start, d, p, q, r],
        edges: vec![
            edge("start", "d", None),
            edge("d", "p", Some("a")),
            edge("d", "q", Some("b")),
            edge("q", "r", None),
        ],
    }
}

#[test]
fn input_from_skipped_branch_is_skipped() {
    let model = dead_input_model();
    let mut rt = Runtime::in_memory(common::sample_topology());
    rt.register_model(model.clone()).unwrap();
    let id = rt
        .create_instance("dead", &common::externals(&model), BTreeMap::new())
        .unwrap();
    rt.complete_task(&id, "start", "qa", None).unwrap();
    rt.complete_task(&id, "d", "qa", Some("b")).unwrap();
    rt.complete_task(&id, "q", "qa", None).unwrap();
    let inst = rt.instance(&id).unwrap();
    assert_eq!(inst.state_of("p"), Some(ActivityState::Skipped));
    assert_eq!(inst.state_of("r"), Some(ActivityState::Skipped));
    assert_eq!(inst.status, InstanceStatus::Completed);
}

#[test]
fn manual_task_errors() {
    let mut rt = Runtime::in_memory(common::sample_topology());
    let model = common::sample_model();
    rt.register_model(model.clone()).unwrap();
    let id = rt
        .create_instance("verify-release", &common::externals(&model), BTreeMap::new())
        .unwrap();
    let err = rt.complete_task(&id, "spec-review", "dev", None).unwrap_err();
    assert!(err.to_string().contains("role"), "{err}");
    let err = rt.complete_task(&id, "decision", "qa", Some("pass")).unwrap_err();
    assert!(matches!(
        err,
        procforge::runtime::RuntimeError::Enactment(EnactmentError::IllegalState { .. })
    ));
    assert!(matches!(
        rt.create_instance("verify-release", &BTreeSet::new(), BTreeMap::new()),
        Err(procforge::runtime::RuntimeError::Enactment(EnactmentError::MissingExternalInput(_)))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Replays each instance event by event: every state change follows the
    /// lifecycle relation, terminal states never change, and finished
    /// instances have nothing left to do.
    #[test]
    fn histories_follow_the_lifecycle(seed in 0u64..10_000) {
        let rt = common::simulate(seed, None);
        for id in rt.instance_ids() {
            let inst = rt.instance(id).unwrap();
            let events = records_to_events(rt.records_of(id)).unwrap();
            let mut replayed = ProcessInstance::replay(id, &inst.model, &[]).unwrap();
            let mut before = states(&replayed);
            for event in &events {
                replayed.apply(event).unwrap();
                let after = states(&replayed);
                for (aid, &s) in &after {
                    let prev = before.get(aid).copied().unwrap_or(ActivityState::Pending);
                    if prev != s {
                        prop_assert!(!prev.is_terminal(), "{aid} left terminal {prev} at seq {}", event.seq);
                        prop_assert!(legal(prev, s), "{aid}: {prev} -> {s} at seq {}", event.seq);
                    }
                }
                before = after;
            }
            prop_assert_eq!(&states(&replayed), &states(inst));

            if inst.status == InstanceStatus::Completed {
                prop_assert!(inst.ready_set().is_empty());
                prop_assert!(inst.activity_states.values().all(|a| a.state.is_terminal()));
            }
            if inst.status == InstanceStatus::Running {
                prop_assert!(inst.activity_states.values().any(|a| !a.state.is_terminal()));
            }
        }
    }

    /// A decision takes exactly the branch named by its label: edges with
    /// other guards lead to skipped activities when that edge is their only
    /// way in.
    #[test]
    fn decisions_take_one_branch(seed in 0u64..10_000) {
        let rt = common::simulate(seed, None);
        for id in rt.instance_ids() {
            let inst = rt.instance(id).unwrap();
            if inst.status != InstanceStatus::Completed {
                continue;
            }
            for (aid, a) in &inst.activity_states {
                let options = inst.guard_options(aid);
                if options.is_empty() || a.state != ActivityState::Completed {
                    continue;
                }
                let label = a.decision_label.as_deref().unwrap();
                prop_assert!(options.iter().any(|o| o == label));
                for e in inst.model.outgoing(aid) {
                    let only_way_in = inst.model.incoming(&e.to_activity).count() == 1;
                    if e.guard.as_deref() != Some(label) && only_way_in {
                        prop_assert_eq!(inst.state_of(&e.to_activity), Some(ActivityState::Skipped));
                    }
                }
            }
        }
    }
}
