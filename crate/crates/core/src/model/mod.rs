//! Process models: activities, artifacts, roles and guarded edges.

mod document;
mod expand;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use document::{parse_process, serialize_process};
pub use expand::{expand_subworkflows, ExpandError};
pub use validate::{validate, Violation, ViolationCode};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub model_id: String,
    pub name: String,
    pub roles: Vec<Role>,
    pub artifacts: Vec<ArtifactSpec>,
    pub activities: Vec<Activity>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub role_id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub artifact_id: String,
    pub name: String,
    pub confidential: bool,
    /// Supplied as a process input rather than produced by an activity.
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivityKind {
    Manual,
    Automated,
    SubWorkflow { model_ref: String },
}

impl ActivityKind {
    pub fn label(&self) -> &'static str {
        match self {
            ActivityKind::Manual => "manual",
            ActivityKind::Automated => "automated",
            ActivityKind::SubWorkflow { .. } => "subworkflow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceDemand {
    pub cpus: u32,
    pub memory_gb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingType {
    Linear,
    Exponential,
}

/// Parameters of the scale-up-on-timeout controller for one automated activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityPolicy {
    pub machine_type: String,
    pub initial_instances: u32,
    pub timeout_hours: f64,
    pub scaling_type: ScalingType,
    pub max_rounds: u32,
    pub max_instances: u32,
}

impl ElasticityPolicy {
    /// Per-round timeout in whole simulated seconds.
    pub fn timeout_s(&self) -> u64 {
        (self.timeout_hours * 3600.0).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub activity_id: String,
    pub kind: ActivityKind,
    pub role_id: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub confidential: bool,
    /// `None` is the empty demand; sub-workflows always carry `None`.
    pub demand: Option<ResourceDemand>,
    pub elasticity: Option<ElasticityPolicy>,
    pub deadline_hours: Option<f64>,
}

impl Activity {
    pub fn is_manual(&self) -> bool {
        matches!(self.kind, ActivityKind::Manual)
    }

    pub fn is_automated(&self) -> bool {
        matches!(self.kind, ActivityKind::Automated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from_activity: String,
    pub to_activity: String,
    pub guard: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("model contains a cycle")]
pub struct CyclicModel;

impl ProcessModel {
    pub fn activity(&self, id: &str) -> Option<&Activity> {
        self.activities.iter().find(|a| a.activity_id == id)
    }

    pub fn artifact(&self, id: &str) -> Option<&ArtifactSpec> {
        self.artifacts.iter().find(|a| a.artifact_id == id)
    }

    pub fn incoming<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to_activity == id)
    }

    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.from_activity == id)
    }

    /// Artifact ids declared external, sorted.
    pub fn external_artifacts(&self) -> BTreeSet<String> {
        self.artifacts
            .iter()
            .filter(|a| a.external)
            .map(|a| a.artifact_id.clone())
            .collect()
    }

    /// True when the activity itself is flagged or touches a confidential artifact.
    pub fn is_confidential(&self, activity: &Activity) -> bool {
        activity.confidential
            || activity
                .inputs
                .iter()
                .chain(&activity.outputs)
                .any(|id| self.artifact(id).is_some_and(|a| a.confidential))
    }
}

/// Groups activities into levels where every predecessor of an activity sits
/// in a strictly earlier level. Ids inside a level are sorted.
pub fn topological_levels(model: &ProcessModel) -> Result<Vec<Vec<String>>, CyclicModel> {
    let mut indegree: BTreeMap<&str, usize> = model
        .activities
        .iter()
        .map(|a| (a.activity_id.as_str(), 0))
        .collect();
    for edge in &model.edges {
        if let Some(d) = indegree.get_mut(edge.to_activity.as_str()) {
            *d += 1;
        }
    }

    let mut levels = Vec::new();
    let mut frontier: Vec<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut placed = 0;
    while !frontier.is_empty() {
        placed += frontier.len();
        let mut next = BTreeSet::new();
        for id in &frontier {
            for edge in model.outgoing(id) {
                if let Some(d) = indegree.get_mut(edge.to_activity.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        next.insert(edge.to_activity.as_str());
                    }
                }
            }
        }
        levels.push(frontier.iter().map(|s| s.to_string()).collect());
        frontier = next.into_iter().collect();
    }

    if placed != indegree.len() {
        return Err(CyclicModel);
    }
    Ok(levels)
}
