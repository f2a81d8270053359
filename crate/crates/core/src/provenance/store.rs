//! Versioned, content-addressed artifact storage.
//!
//! On disk, blobs live at `blobs/<first two hex>/<hash>` and each artifact's
//! version index at `artifacts/<artifact_id>.json` (the id percent-encoded).
//! Identical content is stored once.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};

use super::{content_hash, StoreError};
use crate::engine::ArtifactRef;

const FILE_SAFE: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.');

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Producer {
    External,
    Activity {
        instance_id: String,
        activity_id: String,
        attempt: u32,
        /// Exact input versions consumed, as store artifact ids.
        inputs: Vec<ArtifactRef>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactVersion {
    pub artifact_id: String,
    pub version: u32,
    pub content_hash: String,
    pub size_bytes: u64,
    pub producer: Producer,
    pub created_at_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSelector {
    Version(u32),
    Latest,
}

/// One node of an artifact's ancestry: the version, who produced it, and the
/// ancestry of every input that producer consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineageNode {
    pub artifact_id: String,
    pub version: u32,
    pub content_hash: String,
    pub producer: Producer,
    pub inputs: Vec<LineageNode>,
}

impl LineageNode {
    pub fn depth(&self) -> usize {
        1 + self.inputs.iter().map(LineageNode::depth).max().unwrap_or(0)
    }

    pub fn count(&self, artifact_id: &str, version: u32) -> usize {
        let own = usize::from(self.artifact_id == artifact_id && self.version == version);
        own + self
            .inputs
            .iter()
            .map(|n| n.count(artifact_id, version))
            .sum::<usize>()
    }
}

#[derive(Debug, Default)]
pub struct ArtifactStore {
    root: Option<PathBuf>,
    index: BTreeMap<String, Vec<ArtifactVersion>>,
    blobs: BTreeMap<String, Vec<u8>>,
}

impl ArtifactStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store rooted at `root`, loading existing indexes.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("blobs"))?;
        fs::create_dir_all(root.join("artifacts"))?;
        let mut index = BTreeMap::new();
        for entry in fs::read_dir(root.join("artifacts"))? {
            let path = entry?.path();
            let Some(stem) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".json"))
            else {
                continue;
            };
            let id = percent_decode_str(stem)
                .decode_utf8()
                .map_err(|e| StoreError::StorageFailure(e.to_string()))?
                .into_owned();
            let versions: Vec<ArtifactVersion> = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| StoreError::StorageFailure(format!("{}: {e}", path.display())))?;
            index.insert(id, versions);
        }
        Ok(ArtifactStore {
            root: Some(root),
            index,
            blobs: BTreeMap::new(),
        })
    }

    fn blob_path(root: &Path, hash: &str) -> PathBuf {
        root.join("blobs").join(&hash[..2]).join(hash)
    }

    fn index_path(root: &Path, artifact_id: &str) -> PathBuf {
        let name = utf8_percent_encode(artifact_id, FILE_SAFE).to_string();
        root.join("artifacts").join(format!("{name}.json"))
    }

    fn read_blob(&self, hash: &str) -> Result<Option<Vec<u8>>, StoreError> {
        match &self.root {
            None => Ok(self.blobs.get(hash).cloned()),
            Some(root) => match fs::read(Self::blob_path(root, hash)) {
                Ok(bytes) => Ok(Some(bytes)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            },
        }
    }

    fn write_blob(&mut self, hash: &str, content: &[u8]) -> Result<(), StoreError> {
        if let Some(existing) = self.read_blob(hash)? {
            if existing != content {
                return Err(StoreError::StorageFailure(format!(
                    "hash collision on {hash}"
                )));
            }
            return Ok(());
        }
        match &self.root {
            None => {
                self.blobs.insert(hash.to_string(), content.to_vec());
            }
            Some(root) => {
                let path = Self::blob_path(root, hash);
                fs::create_dir_all(path.parent().expect("blob path has a parent"))?;
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, content)?;
                fs::rename(tmp, path)?;
            }
        }
        Ok(())
    }

    /// Stores a new version of an artifact. Versions are 1, 2, ... per id.
    pub fn put_artifact(
        &mut self,
        artifact_id: &str,
        content: &[u8],
        producer: Producer,
        created_at_s: u64,
    ) -> Result<ArtifactVersion, StoreError> {
        let hash = content_hash(content);
        self.write_blob(&hash, content)?;
        let versions = self.index.entry(artifact_id.to_string()).or_default();
        let record = ArtifactVersion {
            artifact_id: artifact_id.to_string(),
            version: versions.len() as u32 + 1,
            content_hash: hash,
            size_bytes: content.len() as u64,
            producer,
            created_at_s,
        };
        versions.push(record.clone());
        if let Some(root) = &self.root {
            let path = Self::index_path(root, artifact_id);
            let tmp = path.with_extension("json.tmp");
            let body = serde_json::to_vec_pretty(versions)
                .map_err(|e| StoreError::StorageFailure(e.to_string()))?;
            fs::write(&tmp, body)?;
            fs::rename(tmp, path)?;
        }
        Ok(record)
    }

    pub fn version(
        &self,
        artifact_id: &str,
        selector: VersionSelector,
    ) -> Result<&ArtifactVersion, StoreError> {
        let not_found = || StoreError::NotFound {
            artifact_id: artifact_id.to_string(),
            version: match selector {
                VersionSelector::Version(v) => Some(v),
                VersionSelector::Latest => None,
            },
        };
        let versions = self.index.get(artifact_id).ok_or_else(not_found)?;
        match selector {
            VersionSelector::Latest => versions.last(),
            VersionSelector::Version(v) => v
                .checked_sub(1)
                .and_then(|i| versions.get(i as usize)),
        }
        .ok_or_else(not_found)
    }

    /// Fetches a version and its bytes, verifying the bytes against the hash.
    pub fn get_artifact(
        &self,
        artifact_id: &str,
        selector: VersionSelector,
    ) -> Result<(ArtifactVersion, Vec<u8>), StoreError> {
        let record = self.version(artifact_id, selector)?.clone();
        let bytes = self
            .read_blob(&record.content_hash)?
            .ok_or_else(|| StoreError::StorageFailure(format!("blob {} missing", record.content_hash)))?;
        if content_hash(&bytes) != record.content_hash {
            return Err(StoreError::HashMismatch {
                artifact_id: artifact_id.to_string(),
                version: record.version,
            });
        }
        Ok((record, bytes))
    }

    pub fn artifact_ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn blob_count(&self) -> Result<usize, StoreError> {
        match &self.root {
            None => Ok(self.blobs.len()),
            Some(root) => {
                let mut n = 0;
                for shard in fs::read_dir(root.join("blobs"))? {
                    n += fs::read_dir(shard?.path())?.count();
                }
                Ok(n)
            }
        }
    }

    /// Ancestry of one artifact version down to external leaves.
    pub fn lineage(&self, artifact_id: &str, version: u32) -> Result<LineageNode, StoreError> {
        let mut path = BTreeSet::new();
        self.lineage_inner(artifact_id, version, &mut path)
    }

    fn lineage_inner(
        &self,
        artifact_id: &str,
        version: u32,
        path: &mut BTreeSet<(String, u32)>,
    ) -> Result<LineageNode, StoreError> {
        let record = self.version(artifact_id, VersionSelector::Version(version))?;
        let key = (artifact_id.to_string(), version);
        if !path.insert(key.clone()) {
            return Err(StoreError::StorageFailure(format!(
                "lineage of {artifact_id}@{version} loops back on itself"
            )));
        }
        let inputs = match &record.producer {
            Producer::External => Vec::new(),
            Producer::Activity { inputs, .. } => inputs
                .iter()
                .map(|r| self.lineage_inner(&r.artifact_id, r.version, path))
                .collect::<Result<_, _>>()?,
        };
        path.remove(&key);
        Ok(LineageNode {
            artifact_id: record.artifact_id.clone(),
            version: record.version,
            content_hash: record.content_hash.clone(),
            producer: record.producer.clone(),
            inputs,
        })
    }
}
