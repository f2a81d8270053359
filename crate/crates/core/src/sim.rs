//! Discrete-event simulation of a hybrid cloud.
//!
//! Time is an integer count of simulated seconds. Pending events fire in
//! `(time, insertion)` order, so equal timestamps resolve first-in first-out.
//! Instances are billed per started hour from the moment they become
//! running; provisioning time is free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Money;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown cloud `{0}`")]
    UnknownCloud(String),
    #[error("machine type `{machine_type}` is not offered by cloud `{cloud_id}`")]
    UnknownMachineType {
        cloud_id: String,
        machine_type: String,
    },
    #[error("cloud `{cloud_id}` has {free} free cpus, {requested} requested")]
    CapacityExceeded {
        cloud_id: String,
        free: u32,
        requested: u32,
    },
    #[error("instance not running: {0}")]
    InstanceNotRunning(String),
    #[error("task instances span several clouds")]
    MixedClouds,
    #[error("cannot move clock from {now_s} back to {until_s}")]
    ClockRegression { now_s: u64, until_s: u64 },
    #[error("instance count must be positive")]
    ZeroCount,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("topology syntax error: {0}")]
    Syntax(String),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudKind {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineType {
    pub name: String,
    pub cpus: u32,
    pub memory_gb: f64,
    pub price_per_hour: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    pub cloud_id: String,
    pub kind: CloudKind,
    /// `None` means unbounded; only public clouds may omit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_cpus: Option<u32>,
    #[serde(default = "default_latency")]
    pub provisioning_latency_s: u64,
    pub catalog: Vec<MachineType>,
}

fn default_latency() -> u64 {
    120
}

impl CloudSpec {
    pub fn machine(&self, name: &str) -> Option<&MachineType> {
        self.catalog.iter().find(|m| m.name == name)
    }

    fn check(&self) -> Result<(), String> {
        let id = &self.cloud_id;
        if id.is_empty() {
            return Err("cloud_id must not be empty".into());
        }
        if self.catalog.is_empty() {
            return Err(format!("cloud `{id}` has an empty catalog"));
        }
        match (self.kind, self.capacity_cpus) {
            (CloudKind::Private, None) => {
                return Err(format!("private cloud `{id}` needs capacity_cpus"))
            }
            (_, Some(0)) => return Err(format!("cloud `{id}` has zero capacity")),
            _ => {}
        }
        for m in &self.catalog {
            if m.cpus == 0 || !(m.memory_gb.is_finite() && m.memory_gb > 0.0) {
                return Err(format!("machine `{}` on `{id}` needs cpus and memory", m.name));
            }
            if m.price_per_hour < Money::ZERO {
                return Err(format!("machine `{}` on `{id}` has a negative price", m.name));
            }
        }
        Ok(())
    }
}

/// Parses a YAML cloud topology (a list of clouds).
pub fn parse_topology(text: &str) -> Result<Vec<CloudSpec>, TopologyError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| TopologyError::Syntax(e.to_string()))?;
    let clouds: Vec<CloudSpec> =
        serde_yaml::from_value(value).map_err(|e| TopologyError::Invalid(e.to_string()))?;
    let mut seen = std::collections::HashSet::new();
    for c in &clouds {
        c.check().map_err(TopologyError::Invalid)?;
        if !seen.insert(&c.cloud_id) {
            return Err(TopologyError::Invalid(format!(
                "duplicate cloud `{}`",
                c.cloud_id
            )));
        }
    }
    Ok(clouds)
}

/// Work description of one automated task under the parallel duration model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskProfile {
    /// Single-node duration in seconds.
    pub base_duration_s: u64,
    /// Fraction of the work that does not parallelize, in `[0, 1]`.
    pub serial_fraction: f64,
    /// Synchronization cost added per extra node.
    pub sync_overhead_s_per_node: f64,
}

impl Default for TaskProfile {
    fn default() -> Self {
        TaskProfile {
            base_duration_s: 600,
            serial_fraction: 0.0,
            sync_overhead_s_per_node: 0.0,
        }
    }
}

impl TaskProfile {
    pub fn is_valid(&self) -> bool {
        self.base_duration_s > 0
            && (0.0..=1.0).contains(&self.serial_fraction)
            && self.sync_overhead_s_per_node.is_finite()
            && self.sync_overhead_s_per_node >= 0.0
    }
}

/// Duration of a task on `n` nodes: `s*B + (1-s)*B/n + c*(n-1)`, rounded up.
///
/// Sums that land within a nanosecond above an integer are treated as that
/// integer, so decimal inputs such as `s = 0.2` do not round up on
/// floating-point noise.
pub fn task_duration(profile: &TaskProfile, n: u32) -> u64 {
    let n = n.max(1) as f64;
    let b = profile.base_duration_s as f64;
    let s = profile.serial_fraction;
    let d = s * b + (1.0 - s) * b / n + profile.sync_overhead_s_per_node * (n - 1.0);
    (d - 1e-9).ceil().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Provisioning,
    Running,
    Terminated,
}

/// The process activity a group of instances was provisioned for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Owner {
    pub instance_id: String,
    pub activity_id: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudInstance {
    pub vm_id: String,
    pub cloud_id: String,
    pub machine_type: String,
    pub cpus: u32,
    pub price_per_hour: Money,
    pub state: InstanceState,
    pub requested_at_s: u64,
    pub running_at_s: Option<u64>,
    pub terminated_at_s: Option<u64>,
    pub owner: Option<Owner>,
}

impl CloudInstance {
    /// Seconds billed so far: from becoming running until termination (or `now_s`).
    pub fn running_seconds(&self, now_s: u64) -> u64 {
        match self.running_at_s {
            None => 0,
            Some(start) => self.terminated_at_s.unwrap_or(now_s).saturating_sub(start),
        }
    }

    pub fn cost(&self, now_s: u64) -> Money {
        self.price_per_hour * self.running_seconds(now_s).div_ceil(3600)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Succeeded,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    InstanceRunning {
        vm_id: String,
    },
    TaskFinished {
        task_id: u64,
        outcome: TaskOutcome,
        vm_ids: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredEvent {
    pub time_s: u64,
    pub event: SimEvent,
}

/// A scheduled task outcome as returned by [`CloudSim::run_task`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskHandle {
    pub task_id: u64,
    pub outcome: TaskOutcome,
    pub fires_at_s: u64,
    pub duration_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostScope<'a> {
    Instance(&'a str),
    Cloud(&'a str),
    /// Every VM provisioned on behalf of one process instance.
    Process(&'a str),
    All,
}

#[derive(Debug, Clone, Default)]
pub struct SimClock {
    now_s: u64,
    next_seq: u64,
    pending: BTreeMap<(u64, u64), SimEvent>,
}

impl SimClock {
    pub fn now_s(&self) -> u64 {
        self.now_s
    }

    pub fn schedule(&mut self, fire_time_s: u64, event: SimEvent) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert((fire_time_s.max(self.now_s), seq), event);
    }

    pub fn next_fire_time(&self) -> Option<u64> {
        self.pending.keys().next().map(|(t, _)| *t)
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
    }

    /// Pops the earliest event due at or before `until_s`, moving the clock to it.
    fn pop_due(&mut self, until_s: u64) -> Option<(u64, SimEvent)> {
        let (&(t, seq), _) = self.pending.iter().next()?;
        if t > until_s {
            return None;
        }
        let event = self.pending.remove(&(t, seq)).expect("key just observed");
        self.now_s = t;
        Some((t, event))
    }
}

/// The simulated hybrid cloud: specs, every VM ever provisioned, and the clock.
#[derive(Debug, Clone)]
pub struct CloudSim {
    clouds: BTreeMap<String, CloudSpec>,
    instances: BTreeMap<String, CloudInstance>,
    clock: SimClock,
    next_vm: u64,
    next_task: u64,
}

impl CloudSim {
    pub fn new(clouds: Vec<CloudSpec>) -> Self {
        CloudSim {
            clouds: clouds.into_iter().map(|c| (c.cloud_id.clone(), c)).collect(),
            instances: BTreeMap::new(),
            clock: SimClock::default(),
            next_vm: 1,
            next_task: 1,
        }
    }

    pub fn now_s(&self) -> u64 {
        self.clock.now_s()
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn clouds(&self) -> impl Iterator<Item = &CloudSpec> {
        self.clouds.values()
    }

    pub fn cloud(&self, id: &str) -> Option<&CloudSpec> {
        self.clouds.get(id)
    }

    pub fn instance(&self, vm_id: &str) -> Option<&CloudInstance> {
        self.instances.get(vm_id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &CloudInstance> {
        self.instances.values()
    }

    /// Cpus held by non-terminated instances on a cloud.
    pub fn committed_cpus(&self, cloud_id: &str) -> u32 {
        self.instances
            .values()
            .filter(|i| i.cloud_id == cloud_id && i.state != InstanceState::Terminated)
            .map(|i| i.cpus)
            .sum()
    }

    /// Remaining cpus on a cloud, `None` when unbounded.
    pub fn free_cpus(&self, cloud_id: &str) -> Option<u32> {
        let cloud = self.clouds.get(cloud_id)?;
        cloud
            .capacity_cpus
            .map(|cap| cap.saturating_sub(self.committed_cpus(cloud_id)))
    }

    pub fn provision(
        &mut self,
        cloud_id: &str,
        machine_type: &str,
        count: u32,
        owner: Option<Owner>,
    ) -> Result<Vec<CloudInstance>, SimError> {
        if count == 0 {
            return Err(SimError::ZeroCount);
        }
        let cloud = self
            .clouds
            .get(cloud_id)
            .ok_or_else(|| SimError::UnknownCloud(cloud_id.to_string()))?;
        let machine = cloud
            .machine(machine_type)
            .ok_or_else(|| SimError::UnknownMachineType {
                cloud_id: cloud_id.to_string(),
                machine_type: machine_type.to_string(),
            })?
            .clone();
        let requested = machine.cpus.saturating_mul(count);
        if let Some(cap) = cloud.capacity_cpus {
            let free = cap.saturating_sub(self.committed_cpus(cloud_id));
            if requested > free {
                return Err(SimError::CapacityExceeded {
                    cloud_id: cloud_id.to_string(),
                    free,
                    requested,
                });
            }
        }
        let ready_at = self.now_s() + cloud.provisioning_latency_s;

        let mut created = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let vm_id = format!("{cloud_id}-vm-{:04}", self.next_vm);
            self.next_vm += 1;
            let vm = CloudInstance {
                vm_id: vm_id.clone(),
                cloud_id: cloud_id.to_string(),
                machine_type: machine.name.clone(),
                cpus: machine.cpus,
                price_per_hour: machine.price_per_hour,
                state: InstanceState::Provisioning,
                requested_at_s: self.now_s(),
                running_at_s: None,
                terminated_at_s: None,
                owner: owner.clone(),
            };
            self.instances.insert(vm_id.clone(), vm.clone());
            self.clock
                .schedule(ready_at, SimEvent::InstanceRunning { vm_id });
            created.push(vm);
        }
        Ok(created)
    }

    /// Starts a task on a group of running instances of one cloud and
    /// schedules its outcome: success after `task_duration` or a timeout.
    pub fn run_task(
        &mut self,
        vm_ids: &[String],
        profile: &TaskProfile,
        timeout_s: Option<u64>,
    ) -> Result<TaskHandle, SimError> {
        let first = vm_ids
            .first()
            .ok_or_else(|| SimError::InstanceNotRunning("no instances given".into()))?;
        let cloud = self
            .instances
            .get(first)
            .map(|i| i.cloud_id.clone())
            .ok_or_else(|| SimError::InstanceNotRunning(first.clone()))?;
        for id in vm_ids {
            let vm = self
                .instances
                .get(id)
                .ok_or_else(|| SimError::InstanceNotRunning(id.clone()))?;
            if vm.cloud_id != cloud {
                return Err(SimError::MixedClouds);
            }
            if vm.state != InstanceState::Running {
                return Err(SimError::InstanceNotRunning(id.clone()));
            }
        }

        let duration_s = task_duration(profile, vm_ids.len() as u32);
        let (outcome, after) = match timeout_s {
            Some(limit) if duration_s > limit => (TaskOutcome::TimedOut, limit),
            _ => (TaskOutcome::Succeeded, duration_s),
        };
        let task_id = self.next_task;
        self.next_task += 1;
        let fires_at_s = self.now_s() + after;
        self.clock.schedule(
            fires_at_s,
            SimEvent::TaskFinished {
                task_id,
                outcome,
                vm_ids: vm_ids.to_vec(),
            },
        );
        Ok(TaskHandle {
            task_id,
            outcome,
            fires_at_s,
            duration_s,
        })
    }

    /// Fires every pending event due at or before `until_s`, then sets the
    /// clock to `until_s`.
    pub fn advance_clock(&mut self, until_s: u64) -> Result<Vec<FiredEvent>, SimError> {
        let mut fired = Vec::new();
        while let Some(ev) = self.step_until(until_s)? {
            fired.push(ev);
        }
        self.clock.now_s = until_s;
        Ok(fired)
    }

    /// Fires the single earliest event due at or before `until_s`, if any.
    /// The clock moves to the event's time, never to `until_s`.
    pub fn step_until(&mut self, until_s: u64) -> Result<Option<FiredEvent>, SimError> {
        if until_s < self.now_s() {
            return Err(SimError::ClockRegression {
                now_s: self.now_s(),
                until_s,
            });
        }
        let Some((time_s, event)) = self.clock.pop_due(until_s) else {
            return Ok(None);
        };
        match &event {
            SimEvent::InstanceRunning { vm_id } => {
                if let Some(vm) = self.instances.get_mut(vm_id) {
                    if vm.state == InstanceState::Provisioning {
                        vm.state = InstanceState::Running;
                        vm.running_at_s = Some(time_s);
                    }
                }
            }
            SimEvent::TaskFinished { vm_ids, .. } => {
                for id in vm_ids {
                    self.terminate_at(id, time_s);
                }
            }
        }
        Ok(Some(FiredEvent { time_s, event }))
    }

    pub fn terminate(&mut self, vm_id: &str) {
        let now = self.now_s();
        self.terminate_at(vm_id, now);
    }

    fn terminate_at(&mut self, vm_id: &str, time_s: u64) {
        if let Some(vm) = self.instances.get_mut(vm_id) {
            if vm.state != InstanceState::Terminated {
                vm.state = InstanceState::Terminated;
                vm.terminated_at_s = Some(time_s);
            }
        }
    }

    pub fn accrued_cost(&self, scope: CostScope<'_>) -> Money {
        let now = self.now_s();
        self.instances
            .values()
            .filter(|i| match scope {
                CostScope::Instance(id) => i.vm_id == id,
                CostScope::Cloud(id) => i.cloud_id == id,
                CostScope::Process(id) => i.owner.as_ref().is_some_and(|o| o.instance_id == id),
                CostScope::All => true,
            })
            .map(|i| i.cost(now))
            .sum()
    }
}
