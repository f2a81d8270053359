//! Enactment of process instances.
//!
//! Every mutation of a [`ProcessInstance`] is expressed as one or more
//! [`EnactmentEvent`]s and applied through [`ProcessInstance::apply`]. Live
//! commands validate their arguments, build events and apply them; replay
//! applies recorded events to a fresh instance through the same path, so a
//! replayed instance can only differ from the live one if the log differs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate, Activity, ProcessModel, Violation};
use crate::provenance::content_hash;
use crate::sched::{next_scale, PlacementDecision, Scale};
use crate::sim::CloudKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnactmentError {
    #[error("model is not executable: {} violation(s)", .0.len())]
    InvalidModel(Vec<Violation>),
    #[error("external input `{0}` was not supplied")]
    MissingExternalInput(String),
    #[error("`{0}` is not a declared external artifact")]
    UnexpectedExternalInput(String),
    #[error("unknown activity `{0}`")]
    UnknownActivity(String),
    #[error("activity `{activity}` is {state}; cannot {operation}")]
    IllegalState {
        activity: String,
        state: ActivityState,
        operation: &'static str,
    },
    #[error("instance is {0:?}; no further commands are accepted")]
    InstanceClosed(InstanceStatus),
    #[error("activity `{activity}` must not run on {cloud_id}: {reason}")]
    ConstraintViolation {
        activity: String,
        cloud_id: String,
        reason: String,
    },
    #[error("activity `{activity}` belongs to role `{expected}`, not `{actual}`")]
    RoleMismatch {
        activity: String,
        expected: String,
        actual: String,
    },
    #[error("decision label {} does not match any of {options:?}", label.as_deref().map_or("(none)".to_string(), |l| format!("`{l}`")))]
    UnknownDecisionLabel {
        label: Option<String>,
        options: Vec<String>,
    },
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActivityState {
    Pending,
    Ready,
    Scheduled,
    Running,
    AwaitingHuman,
    TimedOut,
    Completed,
    Failed,
    Skipped,
}

impl ActivityState {
    pub const ALL: [ActivityState; 9] = [
        ActivityState::Pending,
        ActivityState::Ready,
        ActivityState::Scheduled,
        ActivityState::Running,
        ActivityState::AwaitingHuman,
        ActivityState::TimedOut,
        ActivityState::Completed,
        ActivityState::Failed,
        ActivityState::Skipped,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ActivityState::Completed | ActivityState::Failed | ActivityState::Skipped
        )
    }

    /// The activity lifecycle relation.
    pub fn can_become(self, next: ActivityState) -> bool {
        use ActivityState::*;
        matches!(
            (self, next),
            (Pending, Ready)
                | (Pending, Skipped)
                | (Ready, Scheduled)
                | (Ready, AwaitingHuman)
                | (Scheduled, Running)
                | (Running, Completed)
                | (Running, TimedOut)
                | (Running, Failed)
                | (TimedOut, Scheduled)
                | (TimedOut, Failed)
                | (AwaitingHuman, Completed)
        )
    }
}

impl fmt::Display for ActivityState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityInstance {
    pub activity_id: String,
    pub state: ActivityState,
    /// Elastic round index.
    pub attempt: u32,
    pub placement: Option<PlacementDecision>,
    pub decision_label: Option<String>,
    pub started_at_s: Option<u64>,
    pub finished_at_s: Option<u64>,
}

impl ActivityInstance {
    fn new(activity_id: &str) -> Self {
        ActivityInstance {
            activity_id: activity_id.to_string(),
            state: ActivityState::Pending,
            attempt: 0,
            placement: None,
            decision_label: None,
            started_at_s: None,
            finished_at_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub artifact_id: String,
    pub version: u32,
}

/// An artifact version as announced in the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedArtifact {
    pub artifact_id: String,
    pub version: u32,
    pub content_hash: String,
    pub size_bytes: u64,
}

impl PublishedArtifact {
    fn of(artifact_id: &str, version: u32, content: &[u8]) -> Self {
        PublishedArtifact {
            artifact_id: artifact_id.to_string(),
            version,
            content_hash: content_hash(content),
            size_bytes: content.len() as u64,
        }
    }

    fn key(&self) -> ArtifactRef {
        ArtifactRef {
            artifact_id: self.artifact_id.clone(),
            version: self.version,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskResult {
    Succeeded,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventKind {
    Instantiated {
        model_id: String,
        external_inputs: Vec<PublishedArtifact>,
    },
    BecameReady {
        activity_id: String,
        /// Manual activities move straight on to `AwaitingHuman`.
        awaiting_human: bool,
    },
    Dispatched {
        activity_id: String,
        placement: PlacementDecision,
    },
    Started {
        activity_id: String,
        attempt: u32,
        vm_ids: Vec<String>,
        inputs: Vec<ArtifactRef>,
    },
    HumanCompleted {
        activity_id: String,
        role: String,
        decision_label: Option<String>,
        inputs: Vec<ArtifactRef>,
        outputs: Vec<PublishedArtifact>,
    },
    TaskCompleted {
        activity_id: String,
        attempt: u32,
        outputs: Vec<PublishedArtifact>,
    },
    TimedOut {
        activity_id: String,
        attempt: u32,
    },
    Rescaled {
        activity_id: String,
        attempt: u32,
        instance_count: u32,
        timeout_s: u64,
        placement: PlacementDecision,
    },
    Skipped {
        activity_id: String,
    },
    Failed {
        activity_id: String,
        reason: String,
    },
    InstanceCompleted {},
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Instantiated { .. } => "Instantiated",
            EventKind::BecameReady { .. } => "BecameReady",
            EventKind::Dispatched { .. } => "Dispatched",
            EventKind::Started { .. } => "Started",
            EventKind::HumanCompleted { .. } => "HumanCompleted",
            EventKind::TaskCompleted { .. } => "TaskCompleted",
            EventKind::TimedOut { .. } => "TimedOut",
            EventKind::Rescaled { .. } => "Rescaled",
            EventKind::Skipped { .. } => "Skipped",
            EventKind::Failed { .. } => "Failed",
            EventKind::InstanceCompleted {} => "InstanceCompleted",
        }
    }

    pub fn activity_id(&self) -> Option<&str> {
        match self {
            EventKind::Instantiated { .. } | EventKind::InstanceCompleted {} => None,
            EventKind::BecameReady { activity_id, .. }
            | EventKind::Dispatched { activity_id, .. }
            | EventKind::Started { activity_id, .. }
            | EventKind::HumanCompleted { activity_id, .. }
            | EventKind::TaskCompleted { activity_id, .. }
            | EventKind::TimedOut { activity_id, .. }
            | EventKind::Rescaled { activity_id, .. }
            | EventKind::Skipped { activity_id }
            | EventKind::Failed { activity_id, .. } => Some(activity_id),
        }
    }

    /// Artifact versions this event makes available.
    pub fn published(&self) -> &[PublishedArtifact] {
        match self {
            EventKind::Instantiated {
                external_inputs, ..
            } => external_inputs,
            EventKind::HumanCompleted { outputs, .. } | EventKind::TaskCompleted { outputs, .. } => {
                outputs
            }
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnactmentEvent {
    /// Per-instance sequence number, starting at 1.
    pub seq: u64,
    pub instance_id: String,
    pub sim_time_s: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusSummary {
    pub instance_id: String,
    pub status: InstanceStatus,
    pub sim_time_s: u64,
    pub counts: BTreeMap<ActivityState, usize>,
}

/// Bytes of a newly published artifact version, handed to the artifact store.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactBlob {
    pub artifact: PublishedArtifact,
    pub content: Vec<u8>,
    /// Producing activity, its round and the inputs it consumed; `None` for external inputs.
    pub producer: Option<(String, u32, Vec<ArtifactRef>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessInstance {
    pub instance_id: String,
    /// Flattened model; sub-workflows are expanded before instantiation.
    pub model: ProcessModel,
    pub activity_states: BTreeMap<String, ActivityInstance>,
    pub available_artifacts: BTreeSet<ArtifactRef>,
    pub artifact_hashes: BTreeMap<ArtifactRef, String>,
    pub status: InstanceStatus,
    pub sim_time_s: u64,
    last_seq: u64,
    outbox: Vec<ArtifactBlob>,
    trace: Option<Vec<(u64, String)>>,
}

fn corrupt(seq: u64, reason: impl Into<String>) -> EnactmentError {
    EnactmentError::CorruptLog {
        seq,
        reason: reason.into(),
    }
}

/// Deterministic stand-in content for a simulated artifact version.
pub fn artifact_content(
    instance_id: &str,
    artifact_id: &str,
    version: u32,
    producer: Option<(&str, u32)>,
    inputs: &[(ArtifactRef, String)],
) -> Vec<u8> {
    let value = serde_json::json!({
        "artifact": artifact_id,
        "instance": instance_id,
        "version": version,
        "producer": producer.map(|(a, k)| serde_json::json!({"activity": a, "attempt": k})),
        "inputs": inputs
            .iter()
            .map(|(r, h)| serde_json::json!([r.artifact_id, r.version, h]))
            .collect::<Vec<_>>(),
    });
    serde_json::to_vec(&value).expect("json values serialize")
}

impl ProcessInstance {
    /// A blank instance awaiting its `Instantiated` event.
    fn blank(instance_id: &str, model: ProcessModel) -> Self {
        ProcessInstance {
            instance_id: instance_id.to_string(),
            activity_states: model
                .activities
                .iter()
                .map(|a| (a.activity_id.clone(), ActivityInstance::new(&a.activity_id)))
                .collect(),
            model,
            available_artifacts: BTreeSet::new(),
            artifact_hashes: BTreeMap::new(),
            status: InstanceStatus::Running,
            sim_time_s: 0,
            last_seq: 0,
            outbox: Vec::new(),
            trace: None,
        }
    }

    /// Creates an instance of a flattened, valid model. All activities start
    /// `Pending`; the supplied external artifacts become available at version 1.
    pub fn instantiate(
        instance_id: &str,
        model: &ProcessModel,
        external_inputs: &BTreeSet<String>,
        now_s: u64,
    ) -> Result<(Self, Vec<EnactmentEvent>), EnactmentError> {
        let violations = validate(model);
        if !violations.is_empty() {
            return Err(EnactmentError::InvalidModel(violations));
        }
        let declared = model.external_artifacts();
        if let Some(extra) = external_inputs.difference(&declared).next() {
            return Err(EnactmentError::UnexpectedExternalInput(extra.clone()));
        }
        if let Some(missing) = declared.difference(external_inputs).next() {
            return Err(EnactmentError::MissingExternalInput(missing.clone()));
        }

        let mut instance = Self::blank(instance_id, model.clone());
        let mut externals = Vec::new();
        for id in &declared {
            let content = artifact_content(instance_id, id, 1, None, &[]);
            let artifact = PublishedArtifact::of(id, 1, &content);
            externals.push(artifact.clone());
            instance.outbox.push(ArtifactBlob {
                artifact,
                content,
                producer: None,
            });
        }
        let mut events = Vec::new();
        instance.emit(
            &mut events,
            now_s,
            EventKind::Instantiated {
                model_id: model.model_id.clone(),
                external_inputs: externals,
            },
        )?;
        instance.settle(&mut events, now_s)?;
        Ok((instance, events))
    }

    /// Rebuilds an instance from its complete event prefix.
    pub fn replay(
        instance_id: &str,
        model: &ProcessModel,
        events: &[EnactmentEvent],
    ) -> Result<Self, EnactmentError> {
        let mut instance = Self::blank(instance_id, model.clone());
        for event in events {
            instance.apply(event)?;
        }
        Ok(instance)
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Starts recording `(seq, state_hash)` after every applied event,
    /// beginning with the current state.
    pub fn enable_trace(&mut self) {
        self.trace = Some(vec![(self.last_seq, crate::provenance::state_hash(self))]);
    }

    pub fn trace(&self) -> Option<&[(u64, String)]> {
        self.trace.as_deref()
    }

    /// Drains the bytes of artifact versions published since the last call.
    pub fn take_outbox(&mut self) -> Vec<ArtifactBlob> {
        std::mem::take(&mut self.outbox)
    }

    pub fn state_of(&self, activity_id: &str) -> Option<ActivityState> {
        self.activity_states.get(activity_id).map(|a| a.state)
    }

    fn activity(&self, id: &str) -> Result<&Activity, EnactmentError> {
        self.model
            .activity(id)
            .ok_or_else(|| EnactmentError::UnknownActivity(id.to_string()))
    }

    fn runtime_state(&self, id: &str) -> Result<&ActivityInstance, EnactmentError> {
        self.activity_states
            .get(id)
            .ok_or_else(|| EnactmentError::UnknownActivity(id.to_string()))
    }

    fn expect_state(
        &self,
        id: &str,
        wanted: ActivityState,
        operation: &'static str,
    ) -> Result<&ActivityInstance, EnactmentError> {
        if self.status != InstanceStatus::Running {
            return Err(EnactmentError::InstanceClosed(self.status));
        }
        let rt = self.runtime_state(id)?;
        if rt.state != wanted {
            return Err(EnactmentError::IllegalState {
                activity: id.to_string(),
                state: rt.state,
                operation,
            });
        }
        Ok(rt)
    }

    fn latest_version(&self, artifact_id: &str) -> Option<u32> {
        self.available_artifacts
            .iter()
            .filter(|r| r.artifact_id == artifact_id)
            .map(|r| r.version)
            .max()
    }

    fn latest_inputs(&self, activity: &Activity) -> Vec<ArtifactRef> {
        activity
            .inputs
            .iter()
            .filter_map(|id| {
                self.latest_version(id).map(|version| ArtifactRef {
                    artifact_id: id.clone(),
                    version,
                })
            })
            .collect()
    }

    /// Labels of the guarded edges leaving an activity, sorted.
    pub fn guard_options(&self, activity_id: &str) -> Vec<String> {
        let set: BTreeSet<String> = self
            .model
            .outgoing(activity_id)
            .filter_map(|e| e.guard.clone())
            .collect();
        set.into_iter().collect()
    }

    fn edge_is_dead(&self, from: &str, guard: Option<&str>) -> bool {
        let Some(src) = self.activity_states.get(from) else {
            return false;
        };
        match src.state {
            ActivityState::Skipped => true,
            ActivityState::Completed => {
                guard.is_some_and(|g| src.decision_label.as_deref() != Some(g))
            }
            _ => false,
        }
    }

    fn edge_is_satisfied(&self, from: &str, guard: Option<&str>) -> bool {
        let Some(src) = self.activity_states.get(from) else {
            return false;
        };
        src.state == ActivityState::Completed
            && guard.is_none_or(|g| src.decision_label.as_deref() == Some(g))
    }

    /// Pending activities whose inputs are all available and whose incoming
    /// edges are all settled, with at least one taken (or none at all).
    pub fn ready_set(&self) -> BTreeSet<String> {
        if self.status != InstanceStatus::Running {
            return BTreeSet::new();
        }
        self.model
            .activities
            .iter()
            .filter(|a| self.state_of(&a.activity_id) == Some(ActivityState::Pending))
            .filter(|a| a.inputs.iter().all(|i| self.latest_version(i).is_some()))
            .filter(|a| {
                let mut any = false;
                let mut taken = false;
                for e in self.model.incoming(&a.activity_id) {
                    any = true;
                    let g = e.guard.as_deref();
                    if self.edge_is_satisfied(&e.from_activity, g) {
                        taken = true;
                    } else if !self.edge_is_dead(&e.from_activity, g) {
                        return false;
                    }
                }
                !any || taken
            })
            .map(|a| a.activity_id.clone())
            .collect()
    }

    /// Moves every member of the ready set on to `Ready` (automated) or
    /// `AwaitingHuman` (manual).
    pub fn promote_ready(&mut self, now_s: u64) -> Result<Vec<EnactmentEvent>, EnactmentError> {
        let mut events = Vec::new();
        for id in self.ready_set() {
            let awaiting_human = self.activity(&id)?.is_manual();
            self.emit(
                &mut events,
                now_s,
                EventKind::BecameReady {
                    activity_id: id,
                    awaiting_human,
                },
            )?;
        }
        Ok(events)
    }

    fn check_placement(
        &self,
        activity_id: &str,
        placement: &PlacementDecision,
        cloud_kind: CloudKind,
    ) -> Result<(), EnactmentError> {
        let activity = self.activity(activity_id)?;
        let violation = |reason: &str| EnactmentError::ConstraintViolation {
            activity: activity_id.to_string(),
            cloud_id: placement.cloud_id.clone(),
            reason: reason.to_string(),
        };
        if placement.activity_id != activity_id {
            return Err(violation("placement was planned for another activity"));
        }
        if placement.instance_count == 0 {
            return Err(violation("placement has no instances"));
        }
        if cloud_kind == CloudKind::Public && self.model.is_confidential(activity) {
            return Err(violation("confidential work must stay on a private cloud"));
        }
        Ok(())
    }

    pub fn dispatch(
        &mut self,
        activity_id: &str,
        placement: PlacementDecision,
        cloud_kind: CloudKind,
        now_s: u64,
    ) -> Result<Vec<EnactmentEvent>, EnactmentError> {
        self.expect_state(activity_id, ActivityState::Ready, "dispatch")?;
        if !self.activity(activity_id)?.is_automated() {
            return Err(EnactmentError::IllegalState {
                activity: activity_id.to_string(),
                state: ActivityState::Ready,
                operation: "dispatch a non-automated activity",
            });
        }
        self.check_placement(activity_id, &placement, cloud_kind)?;
        let mut events = Vec::new();
        self.emit(
            &mut events,
            now_s,
            EventKind::Dispatched {
                activity_id: activity_id.to_string(),
                placement,
            },
        )?;
        Ok(events)
    }

    /// Marks a scheduled activity running once its instances are up.
    pub fn start(
        &mut self,
        activity_id: &str,
        vm_ids: Vec<String>,
        now_s: u64,
    ) -> Result<Vec<EnactmentEvent>, EnactmentError> {
        let rt = self.expect_state(activity_id, ActivityState::Scheduled, "start")?;
        let attempt = rt.attempt;
        let inputs = self.latest_inputs(self.activity(activity_id)?);
        let mut events = Vec::new();
        self.emit(
            &mut events,
            now_s,
            EventKind::Started {
                activity_id: activity_id.to_string(),
                attempt,
                vm_ids,
                inputs,
            },
        )?;
        Ok(events)
    }

    pub fn complete_manual_task(
        &mut self,
        activity_id: &str,
        actor_role: &str,
        decision_label: Option<&str>,
        now_s: u64,
    ) -> Result<Vec<EnactmentEvent>, EnactmentError> {
        self.expect_state(activity_id, ActivityState::AwaitingHuman, "complete")?;
        let activity = self.activity(activity_id)?;
        if activity.role_id != actor_role {
            return Err(EnactmentError::RoleMismatch {
                activity: activity_id.to_string(),
                expected: activity.role_id.clone(),
                actual: actor_role.to_string(),
            });
        }
        let options = self.guard_options(activity_id);
        if !options.is_empty() && !decision_label.is_some_and(|l| options.iter().any(|o| o == l)) {
            return Err(EnactmentError::UnknownDecisionLabel {
                label: decision_label.map(str::to_string),
                options,
            });
        }

        let activity = activity.clone();
        let inputs = self.latest_inputs(&activity);
        let outputs = self.produce_outputs(&activity, 0, &inputs);
        let mut events = Vec::new();
        self.emit(
            &mut events,
            now_s,
            EventKind::HumanCompleted {
                activity_id: activity_id.to_string(),
                role: actor_role.to_string(),
                decision_label: decision_label.map(str::to_string),
                inputs,
                outputs,
            },
        )?;
        self.settle(&mut events, now_s)?;
        Ok(events)
    }

    pub fn on_task_result(
        &mut self,
        activity_id: &str,
        result: TaskResult,
        now_s: u64,
    ) -> Result<Vec<EnactmentEvent>, EnactmentError> {
        let attempt = self
            .expect_state(activity_id, ActivityState::Running, "record a task result")?
            .attempt;
        let activity = self.activity(activity_id)?.clone();
        let mut events = Vec::new();
        match result {
            TaskResult::Succeeded => {
                let inputs = self.latest_inputs(&activity);
                let outputs = self.produce_outputs(&activity, attempt, &inputs);
                self.emit(
                    &mut events,
                    now_s,
                    EventKind::TaskCompleted {
                        activity_id: activity_id.to_string(),
                        attempt,
                        outputs,
                    },
                )?;
            }
            TaskResult::TimedOut => {
                self.emit(
                    &mut events,
                    now_s,
                    EventKind::TimedOut {
                        activity_id: activity_id.to_string(),
                        attempt,
                    },
                )?;
                let exhausted = match &activity.elasticity {
                    Some(policy) => next_scale(policy, attempt + 1) == Scale::Exhausted,
                    None => true,
                };
                if exhausted {
                    self.emit(
                        &mut events,
                        now_s,
                        EventKind::Failed {
                            activity_id: activity_id.to_string(),
                            reason: format!("timed out in round {attempt}; no rounds left"),
                        },
                    )?;
                }
            }
        }
        self.settle(&mut events, now_s)?;
        Ok(events)
    }

    /// Re-schedules a timed-out elastic activity for its next round.
    pub fn rescale(
        &mut self,
        activity_id: &str,
        placement: PlacementDecision,
        cloud_kind: CloudKind,
        timeout_s: u64,
        now_s: u64,
    ) -> Result<Vec<EnactmentEvent>, EnactmentError> {
        let attempt = self
            .expect_state(activity_id, ActivityState::TimedOut, "rescale")?
            .attempt;
        self.check_placement(activity_id, &placement, cloud_kind)?;
        let mut events = Vec::new();
        self.emit(
            &mut events,
            now_s,
            EventKind::Rescaled {
                activity_id: activity_id.to_string(),
                attempt: attempt + 1,
                instance_count: placement.instance_count,
                timeout_s,
                placement,
            },
        )?;
        Ok(events)
    }

    /// Activities that timed out and still have rounds left.
    pub fn pending_rescales(&self) -> Vec<(String, u32)> {
        if self.status != InstanceStatus::Running {
            return Vec::new();
        }
        self.activity_states
            .values()
            .filter(|a| a.state == ActivityState::TimedOut)
            .map(|a| (a.activity_id.clone(), a.attempt))
            .collect()
    }

    pub fn instance_status(&self) -> StatusSummary {
        let mut counts = BTreeMap::new();
        for rt in self.activity_states.values() {
            *counts.entry(rt.state).or_insert(0) += 1;
        }
        StatusSummary {
            instance_id: self.instance_id.clone(),
            status: self.status,
            sim_time_s: self.sim_time_s,
            counts,
        }
    }

    /// Computes output versions and queues their bytes in the outbox.
    fn produce_outputs(
        &mut self,
        activity: &Activity,
        attempt: u32,
        inputs: &[ArtifactRef],
    ) -> Vec<PublishedArtifact> {
        let outputs = self.outputs_for(activity, attempt, inputs);
        for (artifact, content) in &outputs {
            self.outbox.push(ArtifactBlob {
                artifact: artifact.clone(),
                content: content.clone(),
                producer: Some((activity.activity_id.clone(), attempt, inputs.to_vec())),
            });
        }
        outputs.into_iter().map(|(a, _)| a).collect()
    }

    fn outputs_for(
        &self,
        activity: &Activity,
        attempt: u32,
        inputs: &[ArtifactRef],
    ) -> Vec<(PublishedArtifact, Vec<u8>)> {
        let hashed: Vec<(ArtifactRef, String)> = inputs
            .iter()
            .map(|r| (r.clone(), self.artifact_hashes.get(r).cloned().unwrap_or_default()))
            .collect();
        activity
            .outputs
            .iter()
            .map(|id| {
                let version = self.latest_version(id).unwrap_or(0) + 1;
                let content = artifact_content(
                    &self.instance_id,
                    id,
                    version,
                    Some((&activity.activity_id, attempt)),
                    &hashed,
                );
                (PublishedArtifact::of(id, version, &content), content)
            })
            .collect()
    }

    /// Propagates skips along dead branches and closes the instance once
    /// every activity has finished.
    fn settle(&mut self, events: &mut Vec<EnactmentEvent>, now_s: u64) -> Result<(), EnactmentError> {
        if self.status != InstanceStatus::Running {
            return Ok(());
        }
        loop {
            let doomed: Vec<String> = self
                .model
                .activities
                .iter()
                .filter(|a| self.state_of(&a.activity_id) == Some(ActivityState::Pending))
                .filter(|a| {
                    let mut incoming = self.model.incoming(&a.activity_id).peekable();
                    let cut_off = incoming.peek().is_some()
                        && incoming.all(|e| self.edge_is_dead(&e.from_activity, e.guard.as_deref()));
                    cut_off || self.has_dead_input(a)
                })
                .map(|a| a.activity_id.clone())
                .collect();
            if doomed.is_empty() {
                break;
            }
            for activity_id in doomed {
                self.emit(events, now_s, EventKind::Skipped { activity_id })?;
            }
        }
        let done = self.activity_states.values().all(|a| {
            matches!(a.state, ActivityState::Completed | ActivityState::Skipped)
        });
        if done {
            self.emit(events, now_s, EventKind::InstanceCompleted {})?;
        }
        Ok(())
    }

    /// True when an input is unavailable and its producer was skipped, so
    /// the activity can never become ready.
    fn has_dead_input(&self, activity: &Activity) -> bool {
        activity.inputs.iter().any(|input| {
            self.latest_version(input).is_none()
                && self
                    .model
                    .activities
                    .iter()
                    .filter(|p| p.outputs.contains(input))
                    .any(|p| self.state_of(&p.activity_id) == Some(ActivityState::Skipped))
        })
    }

    fn emit(
        &mut self,
        events: &mut Vec<EnactmentEvent>,
        now_s: u64,
        kind: EventKind,
    ) -> Result<(), EnactmentError> {
        let event = EnactmentEvent {
            seq: self.last_seq + 1,
            instance_id: self.instance_id.clone(),
            sim_time_s: now_s.max(self.sim_time_s),
            kind,
        };
        self.apply(&event)?;
        if self.trace.is_some() {
            let hash = crate::provenance::state_hash(self);
            if let Some(trace) = self.trace.as_mut() {
                trace.push((event.seq, hash));
            }
        }
        events.push(event);
        Ok(())
    }

    fn transition(
        &mut self,
        seq: u64,
        activity_id: &str,
        to: ActivityState,
    ) -> Result<&mut ActivityInstance, EnactmentError> {
        let rt = self
            .activity_states
            .get_mut(activity_id)
            .ok_or_else(|| corrupt(seq, format!("unknown activity `{activity_id}`")))?;
        if !rt.state.can_become(to) {
            return Err(corrupt(
                seq,
                format!("illegal transition {} -> {to} for `{activity_id}`", rt.state),
            ));
        }
        rt.state = to;
        Ok(rt)
    }

    fn publish(&mut self, seq: u64, artifacts: &[PublishedArtifact]) -> Result<(), EnactmentError> {
        for art in artifacts {
            let expected = self.latest_version(&art.artifact_id).unwrap_or(0) + 1;
            if art.version != expected {
                return Err(corrupt(
                    seq,
                    format!(
                        "artifact `{}` published as version {}, expected {expected}",
                        art.artifact_id, art.version
                    ),
                ));
            }
            self.available_artifacts.insert(art.key());
            self.artifact_hashes.insert(art.key(), art.content_hash.clone());
        }
        Ok(())
    }

    /// Applies one event. Any event that is not a legal next step for the
    /// current state is rejected as [`EnactmentError::CorruptLog`].
    pub fn apply(&mut self, event: &EnactmentEvent) -> Result<(), EnactmentError> {
        let seq = event.seq;
        if event.instance_id != self.instance_id {
            return Err(corrupt(seq, "event belongs to another instance"));
        }
        if seq != self.last_seq + 1 {
            return Err(corrupt(seq, format!("expected seq {}", self.last_seq + 1)));
        }
        if event.sim_time_s < self.sim_time_s {
            return Err(corrupt(seq, "simulated time went backwards"));
        }
        let first = self.last_seq == 0;
        if first != matches!(event.kind, EventKind::Instantiated { .. }) {
            return Err(corrupt(seq, "Instantiated must be exactly the first event"));
        }
        if !first && self.status != InstanceStatus::Running {
            return Err(corrupt(seq, "event after the instance closed"));
        }
        let t = event.sim_time_s;

        match &event.kind {
            EventKind::Instantiated {
                model_id,
                external_inputs,
            } => {
                if *model_id != self.model.model_id {
                    return Err(corrupt(seq, "log is for another model"));
                }
                self.publish(seq, external_inputs)?;
            }
            EventKind::BecameReady {
                activity_id,
                awaiting_human,
            } => {
                let manual = self
                    .model
                    .activity(activity_id)
                    .is_some_and(Activity::is_manual);
                if manual != *awaiting_human {
                    return Err(corrupt(seq, "only manual activities await a human"));
                }
                self.transition(seq, activity_id, ActivityState::Ready)?;
                if manual {
                    self.transition(seq, activity_id, ActivityState::AwaitingHuman)?;
                }
            }
            EventKind::Dispatched {
                activity_id,
                placement,
            } => {
                let rt = self.transition(seq, activity_id, ActivityState::Scheduled)?;
                rt.placement = Some(placement.clone());
            }
            EventKind::Started {
                activity_id,
                attempt,
                inputs,
                ..
            } => {
                if let Some(missing) = inputs.iter().find(|r| !self.available_artifacts.contains(r)) {
                    return Err(corrupt(
                        seq,
                        format!("input {}@{} not yet available", missing.artifact_id, missing.version),
                    ));
                }
                let rt = self.transition(seq, activity_id, ActivityState::Running)?;
                if rt.attempt != *attempt {
                    return Err(corrupt(seq, "start names the wrong round"));
                }
                rt.started_at_s = Some(t);
            }
            EventKind::HumanCompleted {
                activity_id,
                decision_label,
                outputs,
                ..
            } => {
                let rt = self.transition(seq, activity_id, ActivityState::Completed)?;
                rt.decision_label = decision_label.clone();
                rt.finished_at_s = Some(t);
                self.publish(seq, outputs)?;
            }
            EventKind::TaskCompleted {
                activity_id,
                outputs,
                ..
            } => {
                let rt = self.transition(seq, activity_id, ActivityState::Completed)?;
                rt.finished_at_s = Some(t);
                self.publish(seq, outputs)?;
            }
            EventKind::TimedOut { activity_id, .. } => {
                self.transition(seq, activity_id, ActivityState::TimedOut)?;
            }
            EventKind::Rescaled {
                activity_id,
                attempt,
                placement,
                ..
            } => {
                let rt = self.transition(seq, activity_id, ActivityState::Scheduled)?;
                if *attempt != rt.attempt + 1 {
                    return Err(corrupt(seq, "rescale must advance exactly one round"));
                }
                rt.attempt = *attempt;
                rt.placement = Some(placement.clone());
            }
            EventKind::Skipped { activity_id } => {
                self.transition(seq, activity_id, ActivityState::Skipped)?;
            }
            EventKind::Failed { activity_id, .. } => {
                let rt = self.transition(seq, activity_id, ActivityState::Failed)?;
                rt.finished_at_s = Some(t);
                self.status = InstanceStatus::Failed;
            }
            EventKind::InstanceCompleted {} => {
                let open = self.activity_states.values().find(|a| {
                    !matches!(a.state, ActivityState::Completed | ActivityState::Skipped)
                });
                if let Some(open) = open {
                    return Err(corrupt(
                        seq,
                        format!("`{}` is still {}", open.activity_id, open.state),
                    ));
                }
                self.status = InstanceStatus::Completed;
            }
        }
        self.last_seq = seq;
        self.sim_time_s = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_process;
    use crate::money::Money;

    fn sample() -> ProcessModel {
        parse_process(crate::SAMPLE_MODEL).unwrap()
    }

    fn inputs(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn fresh() -> ProcessInstance {
        ProcessInstance::instantiate("i1", &sample(), &inputs(&["requirements"]), 0)
            .unwrap()
            .0
    }

    fn placement(activity: &str, cloud: &str, count: u32) -> PlacementDecision {
        PlacementDecision {
            activity_id: activity.into(),
            cloud_id: cloud.into(),
            machine_type: "medium".into(),
            instance_count: count,
            estimated_duration_s: 60,
            estimated_cost: Money::from_units(0.1) * count as u64,
        }
    }

    /// Drives an automated activity from Ready through a result.
    fn run_automated(inst: &mut ProcessInstance, id: &str, result: TaskResult) {
        inst.dispatch(id, placement(id, "private", 2), CloudKind::Private, 10)
            .unwrap();
        inst.start(id, vec!["vm".into()], 20).unwrap();
        inst.on_task_result(id, result, 30).unwrap();
    }

    fn through_decision(label: &str) -> ProcessInstance {
        let mut inst = fresh();
        inst.promote_ready(0).unwrap();
        inst.complete_manual_task("spec-review", "qa", None, 5).unwrap();
        inst.promote_ready(5).unwrap();
        run_automated(&mut inst, "build", TaskResult::Succeeded);
        inst.promote_ready(30).unwrap();
        run_automated(&mut inst, "model-check", TaskResult::Succeeded);
        inst.promote_ready(30).unwrap();
        inst.complete_manual_task("decision", "qa", Some(label), 40)
            .unwrap();
        inst
    }

    #[test]
    fn instantiate_leaves_everything_pending() {
        let inst = fresh();
        assert_eq!(inst.activity_states.len(), 6);
        assert_eq!(
            inst.instance_status().counts,
            BTreeMap::from([(ActivityState::Pending, 6)])
        );
        assert!(inst.available_artifacts.contains(&ArtifactRef {
            artifact_id: "requirements".into(),
            version: 1
        }));
    }

    #[test]
    fn missing_external_input() {
        assert_eq!(
            ProcessInstance::instantiate("i", &sample(), &BTreeSet::new(), 0).unwrap_err(),
            EnactmentError::MissingExternalInput("requirements".into())
        );
    }

    #[test]
    fn empty_model_completes_immediately() {
        let model = ProcessModel {
            model_id: "empty".into(),
            name: "empty".into(),
            roles: vec![],
            artifacts: vec![],
            activities: vec![],
            edges: vec![],
        };
        let (inst, events) = ProcessInstance::instantiate("i", &model, &BTreeSet::new(), 0).unwrap();
        assert_eq!(inst.status, InstanceStatus::Completed);
        assert_eq!(events.last().unwrap().kind, EventKind::InstanceCompleted {});
    }

    #[test]
    fn source_activity_is_ready_first() {
        let mut inst = fresh();
        assert_eq!(inst.ready_set(), inputs(&["spec-review"]));
        inst.promote_ready(0).unwrap();
        assert_eq!(inst.state_of("spec-review"), Some(ActivityState::AwaitingHuman));
        inst.complete_manual_task("spec-review", "qa", None, 5).unwrap();
        assert_eq!(inst.ready_set(), inputs(&["build"]));
        let counts = inst.instance_status().counts;
        assert_eq!(counts[&ActivityState::Completed], 1);
        assert_eq!(counts[&ActivityState::Pending], 5);
    }

    #[test]
    fn failing_decision_skips_package() {
        let mut inst = through_decision("fail");
        assert_eq!(inst.state_of("package"), Some(ActivityState::Skipped));
        assert_eq!(inst.ready_set(), inputs(&["fix"]));
        inst.promote_ready(40).unwrap();
        run_automated(&mut inst, "fix", TaskResult::Succeeded);
        assert_eq!(inst.status, InstanceStatus::Completed);
        assert!(inst.ready_set().is_empty());
    }

    #[test]
    fn passing_decision_skips_fix() {
        let inst = through_decision("pass");
        assert_eq!(inst.state_of("fix"), Some(ActivityState::Skipped));
        assert_eq!(inst.ready_set(), inputs(&["package"]));
    }

    #[test]
    fn dispatch_guards() {
        let mut inst = fresh();
        assert!(matches!(
            inst.dispatch("build", placement("build", "public", 1), CloudKind::Public, 0),
            Err(EnactmentError::IllegalState { state: ActivityState::Pending, .. })
        ));
        let mut inst = through_decision("fail");
        inst.promote_ready(40).unwrap();
        assert!(matches!(
            inst.dispatch("fix", placement("fix", "public", 1), CloudKind::Public, 40),
            Err(EnactmentError::ConstraintViolation { .. })
        ));
        assert_eq!(
            inst.dispatch("fix", placement("fix", "private", 1), CloudKind::Private, 40)
                .unwrap()[0]
                .kind
                .name(),
            "Dispatched"
        );
        assert_eq!(inst.state_of("fix"), Some(ActivityState::Scheduled));
    }

    #[test]
    fn manual_completion_errors() {
        let mut inst = fresh();
        inst.promote_ready(0).unwrap();
        assert!(matches!(
            inst.complete_manual_task("spec-review", "dev", None, 1),
            Err(EnactmentError::RoleMismatch { .. })
        ));
        assert!(matches!(
            inst.complete_manual_task("build", "dev", None, 1),
            Err(EnactmentError::IllegalState { .. })
        ));

        let mut inst = fresh();
        inst.promote_ready(0).unwrap();
        inst.complete_manual_task("spec-review", "qa", None, 5).unwrap();
        inst.promote_ready(5).unwrap();
        run_automated(&mut inst, "build", TaskResult::Succeeded);
        inst.promote_ready(30).unwrap();
        run_automated(&mut inst, "model-check", TaskResult::Succeeded);
        inst.promote_ready(30).unwrap();
        for label in [Some("maybe"), None] {
            assert!(matches!(
                inst.complete_manual_task("decision", "qa", label, 40),
                Err(EnactmentError::UnknownDecisionLabel { options, .. }) if options == ["fail", "pass"]
            ));
        }
    }

    fn at_model_check() -> ProcessInstance {
        let mut inst = fresh();
        inst.promote_ready(0).unwrap();
        inst.complete_manual_task("spec-review", "qa", None, 5).unwrap();
        inst.promote_ready(5).unwrap();
        run_automated(&mut inst, "build", TaskResult::Succeeded);
        inst.promote_ready(30).unwrap();
        inst
    }

    #[test]
    fn task_success_publishes_version_one() {
        let mut inst = at_model_check();
        run_automated(&mut inst, "model-check", TaskResult::Succeeded);
        assert_eq!(inst.state_of("model-check"), Some(ActivityState::Completed));
        assert!(inst.available_artifacts.contains(&ArtifactRef {
            artifact_id: "verification-report".into(),
            version: 1
        }));
    }

    #[test]
    fn first_timeout_waits_for_rescale() {
        let mut inst = at_model_check();
        run_automated(&mut inst, "model-check", TaskResult::TimedOut);
        assert_eq!(inst.state_of("model-check"), Some(ActivityState::TimedOut));
        assert_eq!(inst.pending_rescales(), [("model-check".to_string(), 0)]);
        inst.rescale(
            "model-check",
            placement("model-check", "private", 4),
            CloudKind::Private,
            3600,
            40,
        )
        .unwrap();
        let rt = &inst.activity_states["model-check"];
        assert_eq!((rt.state, rt.attempt), (ActivityState::Scheduled, 1));
    }

    #[test]
    fn third_round_timeout_fails_instance() {
        // sample policy: max_rounds = 3
        let mut inst = at_model_check();
        run_automated(&mut inst, "model-check", TaskResult::TimedOut);
        for round in 1..=2u32 {
            inst.rescale(
                "model-check",
                placement("model-check", "private", 2 << round),
                CloudKind::Private,
                3600,
                40,
            )
            .unwrap();
            inst.start("model-check", vec![], 50).unwrap();
            inst.on_task_result("model-check", TaskResult::TimedOut, 60)
                .unwrap();
        }
        assert_eq!(inst.activity_states["model-check"].attempt, 2);
        assert_eq!(inst.state_of("model-check"), Some(ActivityState::Failed));
        assert_eq!(inst.status, InstanceStatus::Failed);
        assert!(matches!(
            inst.promote_ready(70),
            Ok(events) if events.is_empty()
        ));
    }

    #[test]
    fn result_requires_running() {
        let mut inst = fresh();
        assert!(matches!(
            inst.on_task_result("build", TaskResult::Succeeded, 0),
            Err(EnactmentError::IllegalState { .. })
        ));
    }

    #[test]
    fn rerun_versions_increment() {
        let model = parse_process(
            r#"
model_id: twice
name: twice
roles: [{id: r, name: r}]
artifacts: [{id: out, name: out}]
activities:
  - {id: a, kind: automated, role: r, outputs: [out]}
"#,
        )
        .unwrap();
        let (mut inst, _) = ProcessInstance::instantiate("i", &model, &BTreeSet::new(), 0).unwrap();
        inst.promote_ready(0).unwrap();
        let outs = inst.outputs_for(model.activity("a").unwrap(), 0, &[]);
        assert_eq!(outs[0].0.version, 1);
        inst.available_artifacts.insert(outs[0].0.key());
        let outs = inst.outputs_for(model.activity("a").unwrap(), 0, &[]);
        assert_eq!(outs[0].0.version, 2);
    }

    #[test]
    fn replay_rejects_dispatch_before_ready() {
        let inst = fresh();
        let bad = EnactmentEvent {
            seq: 2,
            instance_id: "i1".into(),
            sim_time_s: 1,
            kind: EventKind::Dispatched {
                activity_id: "build".into(),
                placement: placement("build", "private", 1),
            },
        };
        let mut copy = inst.clone();
        assert!(matches!(copy.apply(&bad), Err(EnactmentError::CorruptLog { seq: 2, .. })));
    }

    #[test]
    fn legal_transition_relation() {
        use ActivityState::*;
        let legal = [
            (Pending, Ready),
            (Ready, Scheduled),
            (Ready, AwaitingHuman),
            (Scheduled, Running),
            (Running, Completed),
            (Running, TimedOut),
            (Running, Failed),
            (TimedOut, Scheduled),
            (TimedOut, Failed),
            (AwaitingHuman, Completed),
            (Pending, Skipped),
        ];
        for from in ActivityState::ALL {
            for to in ActivityState::ALL {
                assert_eq!(from.can_become(to), legal.contains(&(from, to)), "{from} -> {to}");
            }
            if from.is_terminal() {
                assert!(ActivityState::ALL.iter().all(|to| !from.can_become(*to)));
            }
        }
    }
}
