mod common;

use procforge::money::Money;
use procforge::sim::{CloudSim, CostScope, InstanceState, SimError, TaskOutcome, TaskProfile};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Provision { cloud: usize, machine: usize, count: u32 },
    Run { group: usize, base: u64, timeout: Option<u64> },
    Advance(u64),
    Terminate(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..2, 0usize..3, 0u32..5).prop_map(|(cloud, machine, count)| Op::Provision { cloud, machine, count }),
        (0usize..8, 1u64..20_000, prop::option::of(600u64..7200))
            .prop_map(|(group, base, timeout)| Op::Run { group, base, timeout }),
        (0u64..5000).prop_map(Op::Advance),
        (0usize..32).prop_map(Op::Terminate),
    ]
}

/// Applies the ops, checking invariants after each one, and returns the
/// final simulator.
fn play(ops: &[Op]) -> Result<CloudSim, TestCaseError> {
    let topology = common::sample_topology();
    let mut sim = CloudSim::new(topology.clone());
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut last_total = Money::ZERO;
    for op in ops {
        match op {
            Op::Provision { cloud, machine, count } => {
                let spec = &topology[*cloud];
                let m = &spec.catalog[*machine % spec.catalog.len()];
                let free = sim.free_cpus(&spec.cloud_id);
                match sim.provision(&spec.cloud_id, &m.name, *count, None) {
                    Ok(vms) => groups.push(vms.into_iter().map(|v| v.vm_id).collect()),
                    Err(SimError::ZeroCount) => prop_assert_eq!(*count, 0),
                    Err(SimError::CapacityExceeded { requested, .. }) => {
                        prop_assert!(free.is_some_and(|f| requested > f));
                    }
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                }
            }
            Op::Run { group, base, timeout } => {
                let Some(vms) = groups.get(*group % groups.len().max(1)) else { continue };
                let all_running = vms
                    .iter()
                    .all(|v| sim.instance(v).unwrap().state == InstanceState::Running);
                let profile = TaskProfile {
                    base_duration_s: *base,
                    serial_fraction: 0.1,
                    sync_overhead_s_per_node: 5.0,
                };
                match sim.run_task(vms, &profile, *timeout) {
                    Ok(handle) => {
                        prop_assert!(all_running);
                        let expected = procforge::task_duration(&profile, vms.len() as u32);
                        prop_assert_eq!(handle.duration_s, expected);
                        let timed_out = timeout.is_some_and(|t| expected > t);
                        prop_assert_eq!(handle.outcome == TaskOutcome::TimedOut, timed_out);
                    }
                    Err(SimError::InstanceNotRunning(_)) => prop_assert!(!all_running),
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                }
            }
            Op::Advance(dt) => {
                let target = sim.now_s() + dt;
                let fired = sim.advance_clock(target).unwrap();
                prop_assert!(fired.windows(2).all(|w| w[0].time_s <= w[1].time_s));
                prop_assert_eq!(sim.now_s(), target);
            }
            Op::Terminate(i) => {
                let ids: Vec<String> = sim.instances().map(|v| v.vm_id.clone()).collect();
                if let Some(id) = ids.get(*i % ids.len().max(1)) {
                    sim.terminate(id);
                    prop_assert_eq!(sim.instance(id).unwrap().state, InstanceState::Terminated);
                }
            }
        }

        // capacity: non-terminated cpus never exceed a private cloud's capacity
        for spec in &topology {
            if let Some(cap) = spec.capacity_cpus {
                let live: u32 = sim
                    .instances()
                    .filter(|v| v.cloud_id == spec.cloud_id && v.state != InstanceState::Terminated)
                    .map(|v| v.cpus)
                    .sum();
                prop_assert!(live <= cap);
                prop_assert_eq!(sim.committed_cpus(&spec.cloud_id), live);
            }
        }
        // billing: totals are the sum of per-VM ceil-hour charges, per cloud
        // and overall, and never decrease
        let now = sim.now_s();
        let mut total = 0i64;
        for vm in sim.instances() {
            let secs = vm.running_at_s.map_or(0, |r| vm.terminated_at_s.unwrap_or(now) - r);
            let micros = vm.price_per_hour.micros() * secs.div_ceil(3600) as i64;
            prop_assert_eq!(sim.accrued_cost(CostScope::Instance(&vm.vm_id)).micros(), micros);
            total += micros;
        }
        prop_assert_eq!(sim.accrued_cost(CostScope::All).micros(), total);
        let per_cloud: Money = topology
            .iter()
            .map(|c| sim.accrued_cost(CostScope::Cloud(&c.cloud_id)))
            .sum();
        prop_assert_eq!(per_cloud.micros(), total);
        prop_assert!(sim.accrued_cost(CostScope::All) >= last_total);
        last_total = sim.accrued_cost(CostScope::All);
    }
    Ok(sim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn invariants_hold_under_random_commands(ops in prop::collection::vec(op(), 1..60)) {
        play(&ops)?;
    }

    #[test]
    fn simulation_is_deterministic(ops in prop::collection::vec(op(), 1..60)) {
        let a = play(&ops)?;
        let b = play(&ops)?;
        let va: Vec<_> = a.instances().cloned().collect();
        let vb: Vec<_> = b.instances().cloned().collect();
        prop_assert_eq!(va, vb);
        prop_assert_eq!(a.now_s(), b.now_s());
    }
}

#[test]
fn clock_cannot_go_back() {
    let mut sim = CloudSim::new(common::sample_topology());
    sim.advance_clock(100).unwrap();
    assert_eq!(
        sim.advance_clock(50),
        Err(SimError::ClockRegression { now_s: 100, until_s: 50 })
    );
}

#[test]
fn billing_rounds_up_to_whole_hours() {
    let mut sim = CloudSim::new(common::sample_topology());
    let vm = sim.provision("public", "medium", 1, None).unwrap().remove(0);
    let latency = common::sample_topology()
        .iter()
        .find(|c| c.cloud_id == "public")
        .unwrap()
        .provisioning_latency_s;
    sim.advance_clock(latency).unwrap();
    assert_eq!(sim.accrued_cost(CostScope::All), Money::ZERO);
    sim.advance_clock(latency + 1).unwrap();
    assert_eq!(sim.accrued_cost(CostScope::All), Money::from_units(0.10));
    sim.advance_clock(latency + 3600).unwrap();
    assert_eq!(sim.accrued_cost(CostScope::All), Money::from_units(0.10));
    sim.advance_clock(latency + 3601).unwrap();
    assert_eq!(sim.accrued_cost(CostScope::All), Money::from_units(0.20));
    sim.terminate(&vm.vm_id);
    sim.advance_clock(latency + 90_000).unwrap();
    assert_eq!(sim.accrued_cost(CostScope::Instance(&vm.vm_id)), Money::from_units(0.20));
}
