//! Provenance: content-addressed artifact versions, the append-only event
//! log, lineage queries and deterministic replay.

mod log;
mod store;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use log::{records_to_events, replay, EventLog, EventRecord, LogHeader, LOG_FORMAT};
pub use store::{ArtifactStore, ArtifactVersion, LineageNode, Producer, VersionSelector};

use crate::engine::{ActivityInstance, ArtifactRef, ProcessInstance};

pub const HASH_ALG: &str = "sha256";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("artifact `{artifact_id}` {} not found", version.map(|v| format!("version {v}")).unwrap_or_default())]
    NotFound {
        artifact_id: String,
        version: Option<u32>,
    },
    #[error("artifact `{artifact_id}` version {version} does not match its content hash")]
    HashMismatch { artifact_id: String, version: u32 },
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StorageFailure(e.to_string())
    }
}

/// Hex sha256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct CanonicalState<'a> {
    activities: Vec<&'a ActivityInstance>,
    artifacts: Vec<&'a ArtifactRef>,
}

/// Digest of the canonical serialization of an instance's activity states
/// (sorted by id) and available artifact versions (sorted).
pub fn state_hash(instance: &ProcessInstance) -> String {
    let state = CanonicalState {
        activities: instance.activity_states.values().collect(),
        artifacts: instance.available_artifacts.iter().collect(),
    };
    content_hash(&serde_json::to_vec(&state).expect("instance state serializes"))
}
