//! YAML process definition documents.
//!
//! Field order of the `*Doc` structs is the emitted key order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{
    Activity, ActivityKind, ArtifactSpec, Edge, ElasticityPolicy, ParseError, ProcessModel,
    ResourceDemand, Role, ScalingType,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    model_id: String,
    name: String,
    #[serde(default)]
    roles: Vec<RoleDoc>,
    #[serde(default)]
    artifacts: Vec<ArtifactDoc>,
    #[serde(default)]
    activities: Vec<ActivityDoc>,
    #[serde(default)]
    edges: Vec<EdgeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoleDoc {
    id: String,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactDoc {
    id: String,
    name: String,
    #[serde(default)]
    confidential: bool,
    #[serde(default)]
    external: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindDoc {
    Manual,
    Automated,
    Subworkflow,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemandDoc {
    cpus: u32,
    memory_gb: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElasticityDoc {
    machine_type: String,
    initial_instances: u32,
    timeout_hours: f64,
    scaling_type: ScalingType,
    max_rounds: u32,
    max_instances: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivityDoc {
    id: String,
    kind: KindDoc,
    role: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    outputs: Vec<String>,
    #[serde(default)]
    confidential: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    demand: Option<DemandDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    elasticity: Option<ElasticityDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    deadline_hours: Option<f64>,
    #[serde(default, rename = "ref", skip_serializing_if = "Option::is_none")]
    model_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    from: String,
    to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    guard: Option<String>,
}

/// Parses a YAML (or JSON) process definition.
///
/// Malformed YAML is a [`ParseError::Syntax`]; well-formed documents with
/// missing, unknown or mistyped keys, or duplicate ids, are a
/// [`ParseError::Schema`]. Graph-level rules are left to [`super::validate`].
pub fn parse_process(text: &str) -> Result<ProcessModel, ParseError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| ParseError::Syntax(e.to_string()))?;
    let doc: ModelDoc =
        serde_yaml::from_value(value).map_err(|e| ParseError::Schema(e.to_string()))?;
    doc.try_into()
}

/// Emits the canonical YAML form of a model.
pub fn serialize_process(model: &ProcessModel) -> String {
    serde_yaml::to_string(&ModelDoc::from(model)).expect("model documents always serialize")
}

fn ensure_unique<'a>(
    what: &str,
    ids: impl Iterator<Item = &'a String>,
) -> Result<(), ParseError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(ParseError::Schema(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

impl TryFrom<ModelDoc> for ProcessModel {
    type Error = ParseError;

    fn try_from(doc: ModelDoc) -> Result<Self, ParseError> {
        ensure_unique("role", doc.roles.iter().map(|r| &r.id))?;
        ensure_unique("artifact", doc.artifacts.iter().map(|a| &a.id))?;
        ensure_unique("activity", doc.activities.iter().map(|a| &a.id))?;

        let activities = doc
            .activities
            .into_iter()
            .map(Activity::try_from)
            .collect::<Result<_, _>>()?;

        Ok(ProcessModel {
            model_id: doc.model_id,
            name: doc.name,
            roles: doc
                .roles
                .into_iter()
                .map(|r| Role {
                    role_id: r.id,
                    name: r.name,
                })
                .collect(),
            artifacts: doc
                .artifacts
                .into_iter()
                .map(|a| ArtifactSpec {
                    artifact_id: a.id,
                    name: a.name,
                    confidential: a.confidential,
                    external: a.external,
                })
                .collect(),
            activities,
            edges: doc
                .edges
                .into_iter()
                .map(|e| Edge {
                    from_activity: e.from,
                    to_activity: e.to,
                    guard: e.guard,
                })
                .collect(),
        })
    }
}

impl TryFrom<ActivityDoc> for Activity {
    type Error = ParseError;

    fn try_from(doc: ActivityDoc) -> Result<Self, ParseError> {
        let kind = match (doc.kind, doc.model_ref) {
            (KindDoc::Subworkflow, Some(model_ref)) => ActivityKind::SubWorkflow { model_ref },
            (KindDoc::Subworkflow, None) => {
                return Err(ParseError::Schema(format!(
                    "activity `{}`: subworkflow requires `ref`",
                    doc.id
                )))
            }
            (_, Some(_)) => {
                return Err(ParseError::Schema(format!(
                    "activity `{}`: `ref` is only allowed on subworkflow activities",
                    doc.id
                )))
            }
            (KindDoc::Manual, None) => ActivityKind::Manual,
            (KindDoc::Automated, None) => ActivityKind::Automated,
        };
        Ok(Activity {
            activity_id: doc.id,
            kind,
            role_id: doc.role,
            inputs: doc.inputs,
            outputs: doc.outputs,
            confidential: doc.confidential,
            demand: doc.demand.map(|d| ResourceDemand {
                cpus: d.cpus,
                memory_gb: d.memory_gb,
            }),
            elasticity: doc.elasticity.map(|e| ElasticityPolicy {
                machine_type: e.machine_type,
                initial_instances: e.initial_instances,
                timeout_hours: e.timeout_hours,
                scaling_type: e.scaling_type,
                max_rounds: e.max_rounds,
                max_instances: e.max_instances,
            }),
            deadline_hours: doc.deadline_hours,
        })
    }
}

impl From<&ProcessModel> for ModelDoc {
    fn from(model: &ProcessModel) -> Self {
        ModelDoc {
            model_id: model.model_id.clone(),
            name: model.name.clone(),
            roles: model
                .roles
                .iter()
                .map(|r| RoleDoc {
                    id: r.role_id.clone(),
                    name: r.name.clone(),
                })
                .collect(),
            artifacts: model
                .artifacts
                .iter()
                .map(|a| ArtifactDoc {
                    id: a.artifact_id.clone(),
                    name: a.name.clone(),
                    confidential: a.confidential,
                    external: a.external,
                })
                .collect(),
            activities: model.activities.iter().map(ActivityDoc::from).collect(),
            edges: model
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    from: e.from_activity.clone(),
                    to: e.to_activity.clone(),
                    guard: e.guard.clone(),
                })
                .collect(),
        }
    }
}

impl From<&Activity> for ActivityDoc {
    fn from(a: &Activity) -> Self {
        let (kind, model_ref) = match &a.kind {
            ActivityKind::Manual => (KindDoc::Manual, None),
            ActivityKind::Automated => (KindDoc::Automated, None),
            ActivityKind::SubWorkflow { model_ref } => {
                (KindDoc::Subworkflow, Some(model_ref.clone()))
            }
        };
        ActivityDoc {
            id: a.activity_id.clone(),
            kind,
            role: a.role_id.clone(),
            inputs: a.inputs.clone(),
            outputs: a.outputs.clone(),
            confidential: a.confidential,
            demand: a.demand.map(|d| DemandDoc {
                cpus: d.cpus,
                memory_gb: d.memory_gb,
            }),
            elasticity: a.elasticity.as_ref().map(|e| ElasticityDoc {
                machine_type: e.machine_type.clone(),
                initial_instances: e.initial_instances,
                timeout_hours: e.timeout_hours,
                scaling_type: e.scaling_type,
                max_rounds: e.max_rounds,
                max_instances: e.max_instances,
            }),
            deadline_hours: a.deadline_hours,
            model_ref,
        }
    }
}
