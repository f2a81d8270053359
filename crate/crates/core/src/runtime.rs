//! The command stream that drives process instances through the simulated
//! cloud.
//!
//! All mutations go through `&mut Runtime`; callers that share a runtime
//! wrap it in a mutex, so commands are applied one at a time in arrival
//! order. After each command the runtime reacts at the current simulated
//! time: ready activities are promoted, automated work is placed and
//! provisioned, started VM groups begin their tasks, and timed-out elastic
//! activities are rescaled. Time only moves when a caller asks for it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{
    ActivityInstance, ArtifactRef, EnactmentError, EnactmentEvent, InstanceStatus,
    ProcessInstance, StatusSummary, TaskResult,
};
use crate::model::{
    expand_subworkflows, topological_levels, validate, Edge, ExpandError, ProcessModel, Violation,
};
use crate::money::Money;
use crate::provenance::{
    ArtifactStore, EventLog, EventRecord, Producer, StoreError,
};
use crate::sched::{
    on_timeout, plan_placements, CloudCapacity, Placement, ReadyTask, SchedulingProblem,
    TimeoutDirective,
};
use crate::sim::{CloudSim, CloudSpec, CostScope, FiredEvent, Owner, SimError, SimEvent, TaskOutcome, TaskProfile};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("model is invalid: {} violation(s)", .0.len())]
    InvalidModel(Vec<Violation>),
    #[error("model `{0}` already exists")]
    ModelExists(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("invalid task profile for `{0}`")]
    InvalidProfile(String),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Enactment(#[from] EnactmentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Store id of an instance-scoped artifact: `<instance_id>:<artifact_id>`.
pub fn store_artifact_id(instance_id: &str, artifact_id: &str) -> String {
    format!("{instance_id}:{artifact_id}")
}

#[derive(Debug)]
struct InstanceEntry {
    instance: ProcessInstance,
    profiles: BTreeMap<String, TaskProfile>,
}

/// VMs provisioned for one activity round, waiting to all become running.
#[derive(Debug, Clone)]
struct VmGroup {
    instance_id: String,
    activity_id: String,
    vm_ids: Vec<String>,
    timeout_s: Option<u64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct InstanceView {
    pub instance_id: String,
    pub model_id: String,
    pub status: InstanceStatus,
    pub sim_time_s: u64,
    pub last_seq: u64,
    pub counts: BTreeMap<String, usize>,
    pub activities: Vec<ActivityInstance>,
    pub available_artifacts: Vec<ArtifactRef>,
    /// Layout levels of the flattened model.
    pub levels: Vec<Vec<String>>,
    pub edges: Vec<Edge>,
}

impl InstanceView {
    pub fn of(instance: &ProcessInstance) -> Self {
        let summary = instance.instance_status();
        InstanceView {
            instance_id: instance.instance_id.clone(),
            model_id: instance.model.model_id.clone(),
            status: instance.status,
            sim_time_s: instance.sim_time_s,
            last_seq: instance.last_seq(),
            counts: summary
                .counts
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            activities: instance.activity_states.values().cloned().collect(),
            available_artifacts: instance.available_artifacts.iter().cloned().collect(),
            levels: topological_levels(&instance.model).unwrap_or_default(),
            edges: instance.model.edges.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct WorkItem {
    pub task_id: String,
    pub instance_id: String,
    pub activity_id: String,
    pub role: String,
    pub guard_options: Vec<String>,
    pub waiting_since_s: u64,
}

pub struct Runtime {
    library: BTreeMap<String, ProcessModel>,
    instances: BTreeMap<String, InstanceEntry>,
    sim: CloudSim,
    log: EventLog,
    store: ArtifactStore,
    default_profile: TaskProfile,
    groups: Vec<VmGroup>,
    tasks: BTreeMap<u64, (String, String)>,
    next_instance: u64,
    tracing: bool,
}

impl Runtime {
    pub fn new(clouds: Vec<CloudSpec>, log: EventLog, store: ArtifactStore) -> Self {
        let next_instance = log
            .records()
            .iter()
            .filter_map(|r| r.instance.strip_prefix("inst-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        Runtime {
            library: BTreeMap::new(),
            instances: BTreeMap::new(),
            sim: CloudSim::new(clouds),
            log,
            store,
            default_profile: TaskProfile::default(),
            groups: Vec::new(),
            tasks: BTreeMap::new(),
            next_instance,
            tracing: false,
        }
    }

    pub fn in_memory(clouds: Vec<CloudSpec>) -> Self {
        Self::new(clouds, EventLog::in_memory(), ArtifactStore::in_memory())
    }

    /// A runtime persisting its log at `<dir>/events.log` and artifacts under `dir`.
    pub fn persistent(clouds: Vec<CloudSpec>, dir: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let dir = dir.as_ref();
        let log = EventLog::open(dir.join("events.log"))?;
        let store = ArtifactStore::open(dir)?;
        Ok(Self::new(clouds, log, store))
    }

    /// Makes new instances record their state hash after every event; see
    /// [`ProcessInstance::trace`].
    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    pub fn set_default_profile(&mut self, profile: TaskProfile) {
        self.default_profile = profile;
    }

    pub fn sim(&self) -> &CloudSim {
        &self.sim
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn now_s(&self) -> u64 {
        self.sim.now_s()
    }

    pub fn models(&self) -> impl Iterator<Item = &ProcessModel> {
        self.library.values()
    }

    pub fn model(&self, model_id: &str) -> Result<&ProcessModel, RuntimeError> {
        self.library
            .get(model_id)
            .ok_or_else(|| RuntimeError::UnknownModel(model_id.to_string()))
    }

    pub fn register_model(&mut self, model: ProcessModel) -> Result<(), RuntimeError> {
        let violations = validate(&model);
        if !violations.is_empty() {
            return Err(RuntimeError::InvalidModel(violations));
        }
        if self.library.contains_key(&model.model_id) {
            return Err(RuntimeError::ModelExists(model.model_id));
        }
        self.library.insert(model.model_id.clone(), model);
        Ok(())
    }

    pub fn instance(&self, instance_id: &str) -> Result<&ProcessInstance, RuntimeError> {
        self.instances
            .get(instance_id)
            .map(|e| &e.instance)
            .ok_or_else(|| RuntimeError::UnknownInstance(instance_id.to_string()))
    }

    pub fn instance_ids(&self) -> impl Iterator<Item = &str> {
        self.instances.keys().map(String::as_str)
    }

    pub fn status(&self, instance_id: &str) -> Result<StatusSummary, RuntimeError> {
        Ok(self.instance(instance_id)?.instance_status())
    }

    pub fn view(&self, instance_id: &str) -> Result<InstanceView, RuntimeError> {
        Ok(InstanceView::of(self.instance(instance_id)?))
    }

    pub fn cost(&self, scope: CostScope<'_>) -> Money {
        self.sim.accrued_cost(scope)
    }

    /// Expands, instantiates and starts a new instance of a registered model.
    pub fn create_instance(
        &mut self,
        model_id: &str,
        external_inputs: &BTreeSet<String>,
        profiles: BTreeMap<String, TaskProfile>,
    ) -> Result<String, RuntimeError> {
        let model = self.model(model_id)?;
        let flat = expand_subworkflows(model, &self.library)?;
        let violations = validate(&flat);
        if !violations.is_empty() {
            return Err(RuntimeError::InvalidModel(violations));
        }
        if let Some((id, _)) = profiles.iter().find(|(_, p)| !p.is_valid()) {
            return Err(RuntimeError::InvalidProfile(id.clone()));
        }
        let instance_id = format!("inst-{:04}", self.next_instance);
        let (mut instance, events) =
            ProcessInstance::instantiate(&instance_id, &flat, external_inputs, self.now_s())?;
        if self.tracing {
            instance.enable_trace();
        }
        self.next_instance += 1;
        self.instances.insert(
            instance_id.clone(),
            InstanceEntry { instance, profiles },
        );
        self.commit(&instance_id, &events)?;
        self.react()?;
        Ok(instance_id)
    }

    /// Completes a manual task or decision point on behalf of `role`.
    pub fn complete_task(
        &mut self,
        instance_id: &str,
        activity_id: &str,
        role: &str,
        decision_label: Option<&str>,
    ) -> Result<(), RuntimeError> {
        let now = self.now_s();
        let entry = self.entry_mut(instance_id)?;
        let events = entry
            .instance
            .complete_manual_task(activity_id, role, decision_label, now)?;
        self.commit(instance_id, &events)?;
        self.react()
    }

    /// Manual tasks currently awaiting a human, optionally filtered.
    pub fn worklist(&self, role: Option<&str>, instance: Option<&str>) -> Vec<WorkItem> {
        let mut items = Vec::new();
        for (id, entry) in &self.instances {
            if instance.is_some_and(|i| i != id) {
                continue;
            }
            let inst = &entry.instance;
            if inst.status != InstanceStatus::Running {
                continue;
            }
            for rt in inst.activity_states.values() {
                if rt.state != crate::engine::ActivityState::AwaitingHuman {
                    continue;
                }
                let Some(activity) = inst.model.activity(&rt.activity_id) else {
                    continue;
                };
                if role.is_some_and(|r| r != activity.role_id) {
                    continue;
                }
                let waiting_since_s = self
                    .log
                    .records_from(0, Some(id))
                    .filter(|r| r.kind == "BecameReady")
                    .filter(|r| r.payload["activity_id"] == rt.activity_id.as_str())
                    .map(|r| r.t)
                    .last()
                    .unwrap_or(0);
                items.push(WorkItem {
                    task_id: format!("{id}:{}", rt.activity_id),
                    instance_id: id.clone(),
                    activity_id: rt.activity_id.clone(),
                    role: activity.role_id.clone(),
                    guard_options: inst.guard_options(&rt.activity_id),
                    waiting_since_s,
                });
            }
        }
        items
    }

    /// Advances simulated time to `until_s`, reacting to every event on the way.
    pub fn advance_to(&mut self, until_s: u64) -> Result<Vec<FiredEvent>, RuntimeError> {
        let mut fired = Vec::new();
        self.react()?;
        while let Some(event) = self.sim.step_until(until_s)? {
            self.handle(&event)?;
            fired.push(event);
            self.react()?;
        }
        self.sim.advance_clock(until_s)?;
        self.react()?;
        Ok(fired)
    }

    /// Runs the simulation until no events remain. Instances are then either
    /// finished, waiting for humans, or blocked on capacity.
    pub fn run_until_quiescent(&mut self) -> Result<u64, RuntimeError> {
        self.react()?;
        while let Some(t) = self.sim.clock().next_fire_time() {
            self.advance_to(t)?;
        }
        Ok(self.now_s())
    }

    fn entry_mut(&mut self, instance_id: &str) -> Result<&mut InstanceEntry, RuntimeError> {
        self.instances
            .get_mut(instance_id)
            .ok_or_else(|| RuntimeError::UnknownInstance(instance_id.to_string()))
    }

    /// Appends events to the log and stores any artifact bytes they publish.
    fn commit(&mut self, instance_id: &str, events: &[EnactmentEvent]) -> Result<(), RuntimeError> {
        for event in events {
            self.log.append_event(event)?;
        }
        let entry = self.entry_mut(instance_id)?;
        let blobs = entry.instance.take_outbox();
        let now = self.now_s();
        for blob in blobs {
            let producer = match blob.producer {
                None => Producer::External,
                Some((activity_id, attempt, inputs)) => Producer::Activity {
                    instance_id: instance_id.to_string(),
                    activity_id,
                    attempt,
                    inputs: inputs
                        .into_iter()
                        .map(|r| ArtifactRef {
                            artifact_id: store_artifact_id(instance_id, &r.artifact_id),
                            version: r.version,
                        })
                        .collect(),
                },
            };
            let id = store_artifact_id(instance_id, &blob.artifact.artifact_id);
            let stored = self.store.put_artifact(&id, &blob.content, producer, now)?;
            if stored.version != blob.artifact.version
                || stored.content_hash != blob.artifact.content_hash
            {
                return Err(StoreError::StorageFailure(format!(
                    "store assigned {id}@{} but the engine published version {}",
                    stored.version, blob.artifact.version
                ))
                .into());
            }
        }
        Ok(())
    }

    /// Zero-time reactions at the current clock reading, repeated until
    /// nothing changes.
    fn react(&mut self) -> Result<(), RuntimeError> {
        loop {
            let mut changed = false;
            let now = self.now_s();
            let ids: Vec<String> = self.instances.keys().cloned().collect();
            for id in &ids {
                let inst = &mut self.entry_mut(id)?.instance;
                if inst.status != InstanceStatus::Running {
                    continue;
                }
                let events = inst.promote_ready(now)?;
                changed |= !events.is_empty();
                self.commit(id, &events)?;
            }
            changed |= self.schedule()?;
            if !changed {
                return Ok(());
            }
        }
    }

    /// Places every ready automated activity and every pending rescale.
    fn schedule(&mut self) -> Result<bool, RuntimeError> {
        // problem keys are `<instance>:<activity>` so ids stay unique across instances
        let mut ready = Vec::new();
        let mut rescales: BTreeMap<String, (u64, u32)> = BTreeMap::new();
        for (iid, entry) in &self.instances {
            let inst = &entry.instance;
            if inst.status != InstanceStatus::Running {
                continue;
            }
            let mut push = |activity_id: &str, attempt: u32| {
                let Some(activity) = inst.model.activity(activity_id) else {
                    return;
                };
                let mut keyed = activity.clone();
                keyed.activity_id = format!("{iid}:{activity_id}");
                ready.push(ReadyTask {
                    confidential: inst.model.is_confidential(activity),
                    profile: entry
                        .profiles
                        .get(activity_id)
                        .copied()
                        .unwrap_or(self.default_profile),
                    activity: keyed,
                    attempt,
                });
            };
            for rt in inst.activity_states.values() {
                if rt.state == crate::engine::ActivityState::Ready
                    && inst.model.activity(&rt.activity_id).is_some_and(|a| a.is_automated())
                {
                    push(&rt.activity_id, 0);
                }
            }
            for (activity_id, attempt) in inst.pending_rescales() {
                let policy = inst
                    .model
                    .activity(&activity_id)
                    .and_then(|a| a.elasticity.as_ref());
                match on_timeout(&activity_id, true, policy, attempt).expect("state is TimedOut") {
                    TimeoutDirective::Rescale {
                        attempt: next,
                        new_timeout_s,
                        ..
                    } => {
                        rescales.insert(format!("{iid}:{activity_id}"), (new_timeout_s, next));
                        push(&activity_id, next);
                    }
                    // the engine fails exhausted activities as soon as they time out
                    TimeoutDirective::Fail => {}
                }
            }
        }
        if ready.is_empty() {
            return Ok(false);
        }

        let clouds = self
            .sim
            .clouds()
            .map(|spec| CloudCapacity {
                free_cpus: self.sim.free_cpus(&spec.cloud_id),
                spec: spec.clone(),
            })
            .collect();
        let plan = plan_placements(&SchedulingProblem { ready, clouds });

        let mut changed = false;
        let now = self.now_s();
        for (key, placement) in plan {
            let Placement::Placed(mut decision) = placement else {
                continue;
            };
            let (iid, activity_id) = key.split_once(':').expect("keys are instance:activity");
            decision.activity_id = activity_id.to_string();
            let cloud_kind = self
                .sim
                .cloud(&decision.cloud_id)
                .map(|c| c.kind)
                .ok_or_else(|| SimError::UnknownCloud(decision.cloud_id.clone()))?;

            let entry = self.entry_mut(iid)?;
            let attempt = rescales.get(&key).map_or(0, |(_, k)| *k);
            let policy_timeout = entry
                .instance
                .model
                .activity(activity_id)
                .and_then(|a| a.elasticity.as_ref())
                .map(|p| p.timeout_s());
            let events = match rescales.get(&key) {
                Some((timeout_s, _)) => entry.instance.rescale(
                    activity_id,
                    decision.clone(),
                    cloud_kind,
                    *timeout_s,
                    now,
                )?,
                None => entry
                    .instance
                    .dispatch(activity_id, decision.clone(), cloud_kind, now)?,
            };
            self.commit(iid, &events)?;

            let owner = Owner {
                instance_id: iid.to_string(),
                activity_id: activity_id.to_string(),
                attempt,
            };
            let vms = self.sim.provision(
                &decision.cloud_id,
                &decision.machine_type,
                decision.instance_count,
                Some(owner),
            )?;
            self.groups.push(VmGroup {
                instance_id: iid.to_string(),
                activity_id: activity_id.to_string(),
                vm_ids: vms.into_iter().map(|v| v.vm_id).collect(),
                timeout_s: policy_timeout,
            });
            changed = true;
        }
        Ok(changed)
    }

    fn handle(&mut self, fired: &FiredEvent) -> Result<(), RuntimeError> {
        match &fired.event {
            SimEvent::InstanceRunning { .. } => self.start_ready_groups(),
            SimEvent::TaskFinished {
                task_id, outcome, ..
            } => {
                let Some((iid, activity_id)) = self.tasks.remove(task_id) else {
                    return Ok(());
                };
                let now = self.now_s();
                let entry = self.entry_mut(&iid)?;
                if entry.instance.status != InstanceStatus::Running {
                    return Ok(());
                }
                let result = match outcome {
                    TaskOutcome::Succeeded => TaskResult::Succeeded,
                    TaskOutcome::TimedOut => TaskResult::TimedOut,
                };
                let events = entry.instance.on_task_result(&activity_id, result, now)?;
                self.commit(&iid, &events)
            }
        }
    }

    /// Starts the task of every VM group whose instances are all running.
    fn start_ready_groups(&mut self) -> Result<(), RuntimeError> {
        let (up, waiting): (Vec<VmGroup>, Vec<VmGroup>) =
            std::mem::take(&mut self.groups).into_iter().partition(|g| {
                g.vm_ids.iter().all(|id| {
                    self.sim
                        .instance(id)
                        .is_some_and(|vm| vm.state == crate::sim::InstanceState::Running)
                })
            });
        self.groups = waiting;
        let now = self.now_s();
        let default_profile = self.default_profile;
        for group in up {
            let entry = self.entry_mut(&group.instance_id)?;
            if entry.instance.status != InstanceStatus::Running {
                for vm in &group.vm_ids {
                    self.sim.terminate(vm);
                }
                continue;
            }
            let profile = entry
                .profiles
                .get(&group.activity_id)
                .copied()
                .unwrap_or(default_profile);
            let events = entry
                .instance
                .start(&group.activity_id, group.vm_ids.clone(), now)?;
            self.commit(&group.instance_id, &events)?;
            let handle = self.sim.run_task(&group.vm_ids, &profile, group.timeout_s)?;
            self.tasks
                .insert(handle.task_id, (group.instance_id, group.activity_id));
        }
        Ok(())
    }

    /// Log records of one instance.
    pub fn records_of<'a>(&'a self, instance_id: &'a str) -> impl Iterator<Item = &'a EventRecord> + 'a {
        self.log.records_from(0, Some(instance_id))
    }
}
