//! Append-only event log.
//!
//! The file is UTF-8 with one JSON object per line. The first line is the
//! header `{"format":"procforge-log","version":1,"hash_alg":"sha256"}`; every
//! following line is a record `{"seq","instance","t","kind","payload"}` with
//! `seq` contiguous from 1. Records are flushed and synced before `append`
//! returns.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{StoreError, HASH_ALG};
use crate::engine::{EnactmentError, EnactmentEvent, EventKind, ProcessInstance};
use crate::model::ProcessModel;

pub const LOG_FORMAT: &str = "procforge-log";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub hash_alg: String,
}

impl Default for LogHeader {
    fn default() -> Self {
        LogHeader {
            format: LOG_FORMAT.to_string(),
            version: 1,
            hash_alg: HASH_ALG.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub seq: u64,
    pub instance: String,
    pub t: u64,
    pub kind: String,
    pub payload: serde_json::Value,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }

    /// Decodes the record back into an engine event carrying `instance_seq`.
    pub fn to_event(&self, instance_seq: u64) -> Result<EnactmentEvent, serde_json::Error> {
        let kind: EventKind = serde_json::from_value(serde_json::json!({
            "kind": self.kind,
            "payload": self.payload,
        }))?;
        Ok(EnactmentEvent {
            seq: instance_seq,
            instance_id: self.instance.clone(),
            sim_time_s: self.t,
            kind,
        })
    }
}

#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    file: Option<File>,
    header: LogHeader,
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            path: None,
            file: None,
            header: LogHeader::default(),
            records: Vec::new(),
        }
    }

    /// Opens an existing log (continuing after its last record) or creates
    /// a new one with a header line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let exists = path.exists() && std::fs::metadata(&path)?.len() > 0;
        let mut header = LogHeader::default();
        let mut records = Vec::new();
        if exists {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                let bad = |e: serde_json::Error| {
                    StoreError::StorageFailure(format!("{} line {}: {e}", path.display(), i + 1))
                };
                if i == 0 {
                    header = serde_json::from_str(&line).map_err(bad)?;
                    if header.format != LOG_FORMAT || header.version != 1 {
                        return Err(StoreError::StorageFailure(format!(
                            "{} is not a version 1 {LOG_FORMAT} file",
                            path.display()
                        )));
                    }
                    continue;
                }
                if line.is_empty() {
                    continue;
                }
                let record: EventRecord = serde_json::from_str(&line).map_err(bad)?;
                if record.seq != records.len() as u64 + 1 {
                    return Err(StoreError::StorageFailure(format!(
                        "{} line {}: seq {} breaks contiguity",
                        path.display(),
                        i + 1,
                        record.seq
                    )));
                }
                records.push(record);
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if !exists {
            let line = serde_json::to_string(&header).expect("header serializes");
            writeln!(file, "{line}")?;
            file.sync_data()?;
        }
        Ok(EventLog {
            path: Some(path),
            file: Some(file),
            header,
            records,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    pub fn last_seq(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    /// Records with `seq >= from_seq`, optionally for one instance only.
    pub fn records_from<'a>(
        &'a self,
        from_seq: u64,
        instance: Option<&'a str>,
    ) -> impl Iterator<Item = &'a EventRecord> + 'a {
        let start = from_seq.saturating_sub(1) as usize;
        self.records
            .iter()
            .skip(start)
            .filter(move |r| instance.is_none_or(|i| r.instance == i))
    }

    pub fn append(
        &mut self,
        instance: &str,
        t: u64,
        kind: &str,
        payload: serde_json::Value,
    ) -> Result<EventRecord, StoreError> {
        let record = EventRecord {
            seq: self.last_seq() + 1,
            instance: instance.to_string(),
            t,
            kind: kind.to_string(),
            payload,
        };
        if let Some(file) = self.file.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
            file.sync_data()?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn append_event(&mut self, event: &EnactmentEvent) -> Result<EventRecord, StoreError> {
        let mut value = serde_json::to_value(&event.kind).expect("events serialize");
        let payload = value
            .get_mut("payload")
            .map(serde_json::Value::take)
            .unwrap_or_else(|| serde_json::json!({}));
        self.append(&event.instance_id, event.sim_time_s, event.kind.name(), payload)
    }
}

/// Decodes records into engine events, numbering each instance's events 1, 2, ...
pub fn records_to_events<'a>(
    records: impl IntoIterator<Item = &'a EventRecord>,
) -> Result<Vec<EnactmentEvent>, EnactmentError> {
    let mut per_instance: HashMap<&str, u64> = HashMap::new();
    records
        .into_iter()
        .map(|r| {
            let n = per_instance.entry(r.instance.as_str()).or_insert(0);
            *n += 1;
            r.to_event(*n).map_err(|e| EnactmentError::CorruptLog {
                seq: r.seq,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Rebuilds one instance from a prefix of its log records.
pub fn replay(
    instance_id: &str,
    records: &[EventRecord],
    model: &ProcessModel,
) -> Result<ProcessInstance, EnactmentError> {
    let own: Vec<&EventRecord> = records.iter().filter(|r| r.instance == instance_id).collect();
    let events = records_to_events(own)?;
    ProcessInstance::replay(instance_id, model, &events)
}
