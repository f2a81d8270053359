//! Inlining of sub-workflow activities.
//!
//! A sub-workflow activity `p` referencing child model `c` is replaced by the
//! activities of `c`, each renamed `p/<child_id>`. Edges into `p` are
//! reattached to the child's single entry (no incoming edges) and edges out of
//! `p` leave from its single exit (no outgoing edges). Child artifacts named
//! in `p`'s own inputs or outputs keep their ids and bind to the parent's
//! declarations; every other child artifact is renamed `p/<artifact_id>`.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use super::{Activity, ActivityKind, ArtifactSpec, Edge, ProcessModel};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExpandError {
    #[error("activity `{activity}` references unknown model `{model_ref}`")]
    UnresolvedReference { activity: String, model_ref: String },
    #[error("recursive sub-workflow chain: {}", chain.join(" -> "))]
    RecursiveSubWorkflow { chain: Vec<String> },
    #[error("sub-workflow `{activity}` has {entries} entry and {exits} exit activities; exactly one of each is required")]
    AmbiguousBoundary {
        activity: String,
        entries: usize,
        exits: usize,
    },
}

/// Replaces every sub-workflow activity by the (recursively expanded)
/// activities of the model it references.
pub fn expand_subworkflows(
    model: &ProcessModel,
    library: &BTreeMap<String, ProcessModel>,
) -> Result<ProcessModel, ExpandError> {
    let mut chain = vec![model.model_id.clone()];
    expand_inner(model, library, &mut chain)
}

fn expand_inner(
    model: &ProcessModel,
    library: &BTreeMap<String, ProcessModel>,
    chain: &mut Vec<String>,
) -> Result<ProcessModel, ExpandError> {
    if !model
        .activities
        .iter()
        .any(|a| matches!(a.kind, ActivityKind::SubWorkflow { .. }))
    {
        return Ok(model.clone());
    }

    let mut out = ProcessModel {
        activities: Vec::new(),
        edges: Vec::new(),
        ..model.clone()
    };
    // sub-workflow id -> (entry id, exit id) after renaming
    let mut boundaries: BTreeMap<&str, (String, String)> = BTreeMap::new();

    for activity in &model.activities {
        let ActivityKind::SubWorkflow { model_ref } = &activity.kind else {
            out.activities.push(activity.clone());
            continue;
        };
        if chain.contains(model_ref) {
            let mut cycle = chain.clone();
            cycle.push(model_ref.clone());
            return Err(ExpandError::RecursiveSubWorkflow { chain: cycle });
        }
        let child = library
            .get(model_ref)
            .ok_or_else(|| ExpandError::UnresolvedReference {
                activity: activity.activity_id.clone(),
                model_ref: model_ref.clone(),
            })?;
        chain.push(model_ref.clone());
        let child = expand_inner(child, library, chain)?;
        chain.pop();

        let prefix = format!("{}/", activity.activity_id);
        let entries: Vec<&Activity> = child
            .activities
            .iter()
            .filter(|a| child.incoming(&a.activity_id).next().is_none())
            .collect();
        let exits: Vec<&Activity> = child
            .activities
            .iter()
            .filter(|a| child.outgoing(&a.activity_id).next().is_none())
            .collect();
        if entries.len() != 1 || exits.len() != 1 {
            return Err(ExpandError::AmbiguousBoundary {
                activity: activity.activity_id.clone(),
                entries: entries.len(),
                exits: exits.len(),
            });
        }
        boundaries.insert(
            &activity.activity_id,
            (
                format!("{prefix}{}", entries[0].activity_id),
                format!("{prefix}{}", exits[0].activity_id),
            ),
        );

        let bound: HashSet<&str> = activity
            .inputs
            .iter()
            .chain(&activity.outputs)
            .map(String::as_str)
            .collect();
        let rename = |id: &String| -> String {
            if bound.contains(id.as_str()) {
                id.clone()
            } else {
                format!("{prefix}{id}")
            }
        };

        for spec in &child.artifacts {
            if !bound.contains(spec.artifact_id.as_str()) {
                out.artifacts.push(ArtifactSpec {
                    artifact_id: rename(&spec.artifact_id),
                    confidential: spec.confidential || activity.confidential,
                    ..spec.clone()
                });
            }
        }
        for role in &child.roles {
            if !out.roles.iter().any(|r| r.role_id == role.role_id) {
                out.roles.push(role.clone());
            }
        }
        for a in &child.activities {
            out.activities.push(Activity {
                activity_id: format!("{prefix}{}", a.activity_id),
                inputs: a.inputs.iter().map(rename).collect(),
                outputs: a.outputs.iter().map(rename).collect(),
                confidential: a.confidential || activity.confidential,
                ..a.clone()
            });
        }
        for e in &child.edges {
            out.edges.push(Edge {
                from_activity: format!("{prefix}{}", e.from_activity),
                to_activity: format!("{prefix}{}", e.to_activity),
                guard: e.guard.clone(),
            });
        }
    }

    let mut parent_edges: Vec<Edge> = model
        .edges
        .iter()
        .map(|e| {
            let from = match boundaries.get(e.from_activity.as_str()) {
                Some((_, exit)) => exit.clone(),
                None => e.from_activity.clone(),
            };
            let to = match boundaries.get(e.to_activity.as_str()) {
                Some((entry, _)) => entry.clone(),
                None => e.to_activity.clone(),
            };
            Edge {
                from_activity: from,
                to_activity: to,
                guard: e.guard.clone(),
            }
        })
        .collect();
    parent_edges.append(&mut out.edges);
    out.edges = parent_edges;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_process, validate};

    const PARENT: &str = r#"
model_id: parent
name: Parent
roles: [{id: dev, name: Dev}]
artifacts:
  - {id: src, name: Source, external: true}
  - {id: report, name: Report}
  - {id: bundle, name: Bundle}
activities:
  - {id: prepare, kind: manual, role: dev, inputs: [src]}
  - {id: verify, kind: subworkflow, role: dev, inputs: [src], outputs: [report], ref: checks}
  - {id: ship, kind: automated, role: dev, inputs: [report], outputs: [bundle]}
edges:
  - {from: prepare, to: verify}
  - {from: verify, to: ship}
"#;

    const CHILD: &str = r#"
model_id: checks
name: Checks
roles: [{id: tester, name: Tester}]
artifacts:
  - {id: src, name: Source, external: true}
  - {id: log, name: Test log}
  - {id: report, name: Report}
activities:
  - {id: test, kind: automated, role: tester, inputs: [src], outputs: [log]}
  - {id: summarize, kind: automated, role: tester, inputs: [log], outputs: [report]}
edges:
  - {from: test, to: summarize}
"#;

    fn library(models: &[&str]) -> BTreeMap<String, ProcessModel> {
        models
            .iter()
            .map(|t| {
                let m = parse_process(t).unwrap();
                (m.model_id.clone(), m)
            })
            .collect()
    }

    #[test]
    fn no_subworkflows_is_identity() {
        let m = parse_process(crate::SAMPLE_MODEL).unwrap();
        assert_eq!(expand_subworkflows(&m, &BTreeMap::new()).unwrap(), m);
    }

    #[test]
    fn inlines_two_child_activities() {
        let parent = parse_process(PARENT).unwrap();
        assert!(validate(&parent).is_empty(), "{:?}", validate(&parent));
        let flat = expand_subworkflows(&parent, &library(&[CHILD])).unwrap();

        assert_eq!(flat.activities.len(), parent.activities.len() - 1 + 2);
        let ids: Vec<&str> = flat.activities.iter().map(|a| a.activity_id.as_str()).collect();
        assert_eq!(ids, ["prepare", "verify/test", "verify/summarize", "ship"]);
        let edges: Vec<(&str, &str)> = flat
            .edges
            .iter()
            .map(|e| (e.from_activity.as_str(), e.to_activity.as_str()))
            .collect();
        assert_eq!(
            edges,
            [
                ("prepare", "verify/test"),
                ("verify/summarize", "ship"),
                ("verify/test", "verify/summarize")
            ]
        );
        assert!(flat.artifact("verify/log").is_some());
        assert_eq!(
            flat.activity("verify/summarize").unwrap().outputs,
            ["report"]
        );
        assert!(flat.roles.iter().any(|r| r.role_id == "tester"));
        assert_eq!(validate(&flat), vec![]);
    }

    #[test]
    fn self_reference_is_recursive() {
        let looping = PARENT.replace("ref: checks", "ref: parent");
        let parent = parse_process(&looping).unwrap();
        let lib = library(&[&looping]);
        assert!(matches!(
            expand_subworkflows(&parent, &lib),
            Err(ExpandError::RecursiveSubWorkflow { chain }) if chain == ["parent", "parent"]
        ));
    }

    #[test]
    fn unresolved_reference() {
        let parent = parse_process(PARENT).unwrap();
        assert_eq!(
            expand_subworkflows(&parent, &BTreeMap::new()),
            Err(ExpandError::UnresolvedReference {
                activity: "verify".into(),
                model_ref: "checks".into()
            })
        );
    }

    #[test]
    fn two_entries_are_ambiguous() {
        let child = CHILD.replace("edges:\n  - {from: test, to: summarize}\n", "");
        let parent = parse_process(PARENT).unwrap();
        assert!(matches!(
            expand_subworkflows(&parent, &library(&[&child])),
            Err(ExpandError::AmbiguousBoundary { entries: 2, exits: 2, .. })
        ));
    }

    #[test]
    fn nested_subworkflows_namespace_transitively() {
        let middle = r#"
model_id: middle
name: Middle
roles: [{id: dev, name: Dev}]
artifacts:
  - {id: src, name: Source, external: true}
  - {id: report, name: Report}
activities:
  - {id: inner, kind: subworkflow, role: dev, inputs: [src], outputs: [report], ref: checks}
"#;
        let parent = parse_process(&PARENT.replace("ref: checks", "ref: middle")).unwrap();
        let flat = expand_subworkflows(&parent, &library(&[CHILD, middle])).unwrap();
        assert!(flat.activity("verify/inner/test").is_some());
        assert_eq!(validate(&flat), vec![]);
    }
}
