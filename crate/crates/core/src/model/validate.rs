use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use super::{ActivityKind, ProcessModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    DuplicateRole,
    DuplicateArtifact,
    DuplicateActivity,
    UnknownRole,
    UnknownArtifact,
    UnknownEdgeEndpoint,
    CycleDetected,
    MultipleProducers,
    MissingProducer,
    ExternalArtifactProduced,
    ElasticityNotAutomated,
    InvalidElasticity,
    SubWorkflowDemand,
    InvalidDemand,
    InvalidDeadline,
    EmptyGuard,
    GuardOnNonManual,
    DuplicateGuard,
}

/// One broken model rule. `ids` names the offending elements, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub ids: Vec<String>,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, ids: Vec<String>, message: impl Into<String>) -> Self {
        Violation {
            code,
            ids,
            message: message.into(),
        }
    }

    fn one(code: ViolationCode, id: &str, message: impl Into<String>) -> Self {
        Self::new(code, vec![id.to_string()], message)
    }
}

/// Checks every static well-formedness rule of a model. An empty result means
/// the model is executable.
pub fn validate(model: &ProcessModel) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();

    duplicates(&mut out, DuplicateRole, model.roles.iter().map(|r| &r.role_id));
    duplicates(
        &mut out,
        DuplicateArtifact,
        model.artifacts.iter().map(|a| &a.artifact_id),
    );
    duplicates(
        &mut out,
        DuplicateActivity,
        model.activities.iter().map(|a| &a.activity_id),
    );

    let roles: HashSet<&str> = model.roles.iter().map(|r| r.role_id.as_str()).collect();
    let artifacts: HashMap<&str, bool> = model
        .artifacts
        .iter()
        .map(|a| (a.artifact_id.as_str(), a.external))
        .collect();
    let mut producers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();

    for a in &model.activities {
        let id = a.activity_id.as_str();
        if !roles.contains(a.role_id.as_str()) {
            out.push(Violation::one(
                UnknownRole,
                id,
                format!("activity `{id}` names undeclared role `{}`", a.role_id),
            ));
        }
        for art in a.inputs.iter().chain(&a.outputs) {
            if !artifacts.contains_key(art.as_str()) {
                out.push(Violation::new(
                    UnknownArtifact,
                    vec![id.to_string(), art.clone()],
                    format!("activity `{id}` references undeclared artifact `{art}`"),
                ));
            }
        }
        for art in &a.outputs {
            producers.entry(art.as_str()).or_default().push(id);
        }

        let is_sub = matches!(a.kind, ActivityKind::SubWorkflow { .. });
        if let Some(policy) = &a.elasticity {
            if !a.is_automated() {
                out.push(Violation::one(
                    ElasticityNotAutomated,
                    id,
                    format!("activity `{id}` has an elasticity policy but is not automated"),
                ));
            }
            let bad = policy.initial_instances == 0
                || policy.max_rounds == 0
                || policy.max_instances == 0
                || policy.initial_instances > policy.max_instances
                || !(policy.timeout_hours.is_finite() && policy.timeout_hours > 0.0)
                || policy.machine_type.is_empty();
            if bad {
                out.push(Violation::one(
                    InvalidElasticity,
                    id,
                    format!("activity `{id}`: elasticity needs 1 <= initial <= max instances, max_rounds >= 1, timeout > 0"),
                ));
            }
        }
        if let Some(d) = &a.demand {
            if is_sub {
                out.push(Violation::one(
                    SubWorkflowDemand,
                    id,
                    format!("sub-workflow activity `{id}` must not declare a demand"),
                ));
            }
            if d.cpus == 0 || !(d.memory_gb.is_finite() && d.memory_gb > 0.0) {
                out.push(Violation::one(
                    InvalidDemand,
                    id,
                    format!("activity `{id}`: demand needs cpus >= 1 and memory_gb > 0"),
                ));
            }
        }
        if let Some(h) = a.deadline_hours {
            if !(h.is_finite() && h > 0.0) {
                out.push(Violation::one(
                    InvalidDeadline,
                    id,
                    format!("activity `{id}`: deadline_hours must be positive"),
                ));
            }
        }
    }

    for spec in &model.artifacts {
        let id = spec.artifact_id.as_str();
        let prods = producers.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if spec.external && !prods.is_empty() {
            out.push(Violation::new(
                ExternalArtifactProduced,
                sorted(std::iter::once(id).chain(prods.iter().copied())),
                format!("external artifact `{id}` must not be produced by an activity"),
            ));
        } else if !spec.external && prods.len() > 1 {
            out.push(Violation::one(
                MultipleProducers,
                id,
                format!("artifact `{id}` is produced by {}", prods.join(", ")),
            ));
        } else if !spec.external && prods.is_empty() {
            out.push(Violation::one(
                MissingProducer,
                id,
                format!("artifact `{id}` is neither external nor produced"),
            ));
        }
    }

    let activity_kinds: HashMap<&str, &ActivityKind> = model
        .activities
        .iter()
        .map(|a| (a.activity_id.as_str(), &a.kind))
        .collect();
    let mut guards_seen: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in &model.edges {
        let from = e.from_activity.as_str();
        for end in [from, e.to_activity.as_str()] {
            if !activity_kinds.contains_key(end) {
                out.push(Violation::new(
                    UnknownEdgeEndpoint,
                    vec![from.to_string(), e.to_activity.clone()],
                    format!("edge {from} -> {} names unknown activity `{end}`", e.to_activity),
                ));
            }
        }
        if let Some(guard) = &e.guard {
            if guard.trim().is_empty() {
                out.push(Violation::one(
                    EmptyGuard,
                    from,
                    format!("edge {from} -> {} has an empty guard", e.to_activity),
                ));
            }
            match activity_kinds.get(from) {
                Some(ActivityKind::Manual) | None => {}
                Some(_) => out.push(Violation::one(
                    GuardOnNonManual,
                    from,
                    format!("guarded edge leaves non-manual activity `{from}`"),
                )),
            }
            if !guards_seen.entry(from).or_default().insert(guard.as_str()) {
                out.push(Violation::new(
                    DuplicateGuard,
                    vec![from.to_string(), guard.clone()],
                    format!("activity `{from}` has several outgoing edges guarded by `{guard}`"),
                ));
            }
        }
    }

    out.extend(cycles(model));
    out
}

fn sorted<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = ids.collect();
    set.into_iter().map(str::to_string).collect()
}

fn duplicates<'a>(
    out: &mut Vec<Violation>,
    code: ViolationCode,
    ids: impl Iterator<Item = &'a String>,
) {
    let mut seen = HashSet::new();
    let mut reported = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) && reported.insert(id) {
            out.push(Violation::one(code, id, format!("id `{id}` is declared twice")));
        }
    }
}

fn cycles(model: &ProcessModel) -> Vec<Violation> {
    let mut graph = DiGraph::<&str, ()>::new();
    let mut nodes = HashMap::new();
    for a in &model.activities {
        nodes
            .entry(a.activity_id.as_str())
            .or_insert_with(|| graph.add_node(a.activity_id.as_str()));
    }
    for e in &model.edges {
        if let (Some(&f), Some(&t)) = (
            nodes.get(e.from_activity.as_str()),
            nodes.get(e.to_activity.as_str()),
        ) {
            graph.add_edge(f, t, ());
        }
    }

    let mut found: Vec<Vec<String>> = tarjan_scc(&graph)
        .into_iter()
        .filter(|scc| scc.len() > 1 || graph.contains_edge(scc[0], scc[0]))
        .map(|scc| sorted(scc.iter().map(|n| graph[*n])))
        .collect();
    found.sort();
    found
        .into_iter()
        .map(|ids| {
            let msg = format!("activities {} form a cycle", ids.join(", "));
            Violation::new(ViolationCode::CycleDetected, ids, msg)
        })
        .collect()
}
