//! Server configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_process, ProcessModel};
use crate::sim::{parse_topology, CloudSpec, TaskProfile};

/// Overrides `data_dir` when set.
pub const DATA_DIR_ENV: &str = "PROCFORGE_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Syntax { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Written as `{mode: manual}` or `{mode: auto_step, step_s: 60}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockMode {
    #[default]
    Manual,
    /// Advance simulated time by `step_s` once per wall-clock second.
    AutoStep { step_s: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Falls back to the bundled two-cloud topology.
    #[serde(default)]
    pub cloud_topology_path: Option<PathBuf>,
    /// Model files, or directories scanned for `*.yaml` / `*.yml`.
    #[serde(default)]
    pub model_library_paths: Vec<PathBuf>,
    #[serde(default)]
    pub clock_mode: ClockMode,
    /// Per-activity task profiles used when an instance request has none.
    #[serde(default)]
    pub task_profiles_path: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("procforge-data")
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen_address: default_listen(),
            data_dir: default_data_dir(),
            cloud_topology_path: None,
            model_library_paths: Vec::new(),
            clock_mode: ClockMode::Manual,
            task_profiles_path: None,
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl ServerConfig {
    pub fn parse(text: &str) -> Result<Self, serde_yaml::Error> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_yaml::from_str(text)
    }

    /// Loads the config file (or defaults) and applies the environment override.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            None => Self::default(),
            Some(p) => Self::parse(&read(p)?).map_err(|e| ConfigError::Syntax {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?,
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            config.data_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    /// Checks the invariants that can be checked before serving: the clock
    /// step is positive, the data directory is writable and the topology
    /// parses.
    pub fn check(&self) -> Result<Vec<CloudSpec>, ConfigError> {
        if self.clock_mode == (ClockMode::AutoStep { step_s: 0 }) {
            return Err(ConfigError::Invalid("auto_step.step_s must be positive".into()));
        }
        std::fs::create_dir_all(&self.data_dir).map_err(|e| ConfigError::Io {
            path: self.data_dir.clone(),
            reason: e.to_string(),
        })?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| ConfigError::Invalid(format!(
                "data_dir {} is not writable: {e}",
                self.data_dir.display()
            )))?;
        self.topology()
    }

    pub fn topology(&self) -> Result<Vec<CloudSpec>, ConfigError> {
        let (text, path) = match &self.cloud_topology_path {
            Some(p) => (read(p)?, p.clone()),
            None => (crate::SAMPLE_TOPOLOGY.to_string(), PathBuf::from("<bundled topology>")),
        };
        parse_topology(&text).map_err(|e| ConfigError::Syntax {
            path,
            reason: e.to_string(),
        })
    }

    /// Every model found on the library paths, in path order.
    pub fn library(&self) -> Result<Vec<ProcessModel>, ConfigError> {
        let mut files = Vec::new();
        for path in &self.model_library_paths {
            if path.is_dir() {
                let entries = std::fs::read_dir(path).map_err(|e| ConfigError::Io {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                let mut found: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension()
                            .is_some_and(|x| x == "yaml" || x == "yml")
                    })
                    .collect();
                found.sort();
                files.extend(found);
            } else {
                files.push(path.clone());
            }
        }
        files
            .iter()
            .map(|p| {
                parse_process(&read(p)?).map_err(|e| ConfigError::Syntax {
                    path: p.clone(),
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    pub fn task_profiles(&self) -> Result<BTreeMap<String, TaskProfile>, ConfigError> {
        match &self.task_profiles_path {
            None => Ok(BTreeMap::new()),
            Some(p) => parse_profiles(&read(p)?).map_err(|reason| ConfigError::Syntax {
                path: p.clone(),
                reason,
            }),
        }
    }
}

/// Parses a YAML map of activity id to task profile.
pub fn parse_profiles(text: &str) -> Result<BTreeMap<String, TaskProfile>, String> {
    let profiles: BTreeMap<String, TaskProfile> =
        serde_yaml::from_str(text).map_err(|e| e.to_string())?;
    match profiles.iter().find(|(_, p)| !p.is_valid()) {
        Some((id, _)) => Err(format!("task profile for `{id}` is out of range")),
        None => Ok(profiles),
    }
}
