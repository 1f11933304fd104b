//! Cardiac session storage: ingestion with plausibility flags, encrypted
//! profiles, CSV export/import and timed replay.
//!
//! On disk each session is a `<id>.meta.json` file plus an append-only
//! `<id>.records.ndjson` file, with `index.json` listing known sessions.

mod crypto;
mod csv_io;

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde::{Deserialize, Serialize};

pub use crypto::{decrypt_profile, encrypt_profile, ProfileKey, KEY_ENV};
pub use csv_io::{records_from_csv, records_to_csv, replay, replay_schedule, CSV_HEADER};

use crate::windowing::Label;

pub const RRI_MIN_MS: f64 = 200.0;
pub const RRI_MAX_MS: f64 = 4000.0;
pub const SHORT_SESSION_MINUTES: f64 = 70.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("session not found: {0}")]
    NotFound(String),
    #[error("invalid session state: {0}")]
    State(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("authentication failed: wrong key or tampered data")]
    Authentication,
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardiacRecord {
    pub timestamp_ms: i64,
    pub rri_ms: Option<f64>,
    pub hr_bpm: Option<f64>,
    pub ecg_uv: Option<f64>,
}

impl CardiacRecord {
    pub fn rri(timestamp_ms: i64, rri_ms: f64) -> Self {
        Self {
            timestamp_ms,
            rri_ms: Some(rri_ms),
            hr_bpm: Some(60_000.0 / rri_ms),
            ecg_uv: None,
        }
    }

    pub fn rri_plausible(&self) -> bool {
        self.rri_ms.is_some_and(|r| (RRI_MIN_MS..=RRI_MAX_MS).contains(&r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    Other,
    Undisclosed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub age: u32,
    pub sex: Sex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    H9Like,
    H10Like,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SessionState {
    Recording,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFlag {
    NonMonotonicTimestamp,
    ImplausibleRri,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionFlag {
    ShortSession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub flags: Vec<RecordFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub duration_min: f64,
    pub n_records: usize,
    pub flags: Vec<SessionFlag>,
    pub flagged_records: usize,
}

/// Persisted session header. The profile is only ever held encrypted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub device_kind: DeviceKind,
    pub state: SessionState,
    pub label: Option<Label>,
    pub encrypted_profile: String,
    pub n_records: usize,
    pub flagged_records: usize,
    pub first_timestamp_ms: Option<i64>,
    pub last_timestamp_ms: Option<i64>,
    pub created_at: String,
}

impl SessionMeta {
    pub fn duration_min(&self) -> f64 {
        match (self.first_timestamp_ms, self.last_timestamp_ms) {
            (Some(a), Some(b)) => (b - a) as f64 / 60_000.0,
            _ => 0.0,
        }
    }

    pub fn summary(&self) -> SessionSummary {
        let duration_min = self.duration_min();
        let mut flags = Vec::new();
        if duration_min < SHORT_SESSION_MINUTES {
            flags.push(SessionFlag::ShortSession);
        }
        SessionSummary {
            session_id: self.session_id.clone(),
            duration_min,
            n_records: self.n_records,
            flags,
            flagged_records: self.flagged_records,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredRecord {
    #[serde(flatten)]
    record: CardiacRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<RecordFlag>,
}

struct SessionEntry {
    meta: SessionMeta,
}

pub struct SignalStore {
    dir: PathBuf,
    key: ProfileKey,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    index_lock: Mutex<()>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl SignalStore {
    /// Open (or create) a store rooted at `dir`, loading existing sessions.
    pub fn open(dir: impl Into<PathBuf>, key: ProfileKey) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        let index = dir.join("index.json");
        if index.is_file() {
            let ids: Vec<String> =
                serde_json::from_slice(&fs::read(&index)?).map_err(|e| StoreError::Io(format!("index.json: {e}")))?;
            for id in ids {
                let meta_path = dir.join(format!("{id}.meta.json"));
                let meta: SessionMeta = serde_json::from_slice(&fs::read(&meta_path)?)
                    .map_err(|e| StoreError::Io(format!("{}: {e}", meta_path.display())))?;
                sessions.insert(id, Arc::new(Mutex::new(SessionEntry { meta })));
            }
        }
        Ok(Self {
            dir,
            key,
            sessions: Mutex::new(sessions),
            index_lock: Mutex::new(()),
        })
    }

    /// Open with the key taken from the environment.
    pub fn open_from_env(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open(dir, ProfileKey::from_env()?)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn records_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.records.ndjson"))
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, StoreError> {
        self.sessions
            .lock()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    fn persist_meta(&self, meta: &SessionMeta) -> Result<(), StoreError> {
        let json = serde_json::to_vec_pretty(meta).map_err(|e| StoreError::Internal(e.to_string()))?;
        write_atomic(&self.dir.join(format!("{}.meta.json", meta.session_id)), &json)
    }

    fn persist_index(&self) -> Result<(), StoreError> {
        let _guard = self.index_lock.lock().expect("index lock");
        let mut ids: Vec<String> = self.sessions.lock().expect("store lock").keys().cloned().collect();
        ids.sort();
        let json = serde_json::to_vec(&ids).map_err(|e| StoreError::Internal(e.to_string()))?;
        write_atomic(&self.dir.join("index.json"), &json)
    }

    pub fn open_session(&self, profile: &Profile, device_kind: DeviceKind) -> Result<String, StoreError> {
        if profile.name.trim().is_empty() {
            return Err(StoreError::Validation("profile name is required".into()));
        }
        let (id, entry) = loop {
            let id = uuid::Uuid::new_v4().simple().to_string();
            let blob = encrypt_profile(&self.key, &id, profile)?;
            let meta = SessionMeta {
                session_id: id.clone(),
                device_kind,
                state: SessionState::Recording,
                label: None,
                encrypted_profile: base64::engine::general_purpose::STANDARD.encode(blob),
                n_records: 0,
                flagged_records: 0,
                first_timestamp_ms: None,
                last_timestamp_ms: None,
                created_at: chrono::Utc::now().to_rfc3339(),
            };
            let mut sessions = self.sessions.lock().expect("store lock");
            if sessions.contains_key(&id) {
                continue;
            }
            let entry = Arc::new(Mutex::new(SessionEntry { meta }));
            sessions.insert(id.clone(), entry.clone());
            break (id, entry);
        };
        self.persist_meta(&entry.lock().expect("session lock").meta)?;
        fs::File::create(self.records_path(&id))?;
        self.persist_index()?;
        Ok(id)
    }

    pub fn set_label(&self, id: &str, label: Option<Label>) -> Result<(), StoreError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().expect("session lock");
        e.meta.label = label;
        self.persist_meta(&e.meta)
    }

    pub fn ingest_record(&self, id: &str, record: CardiacRecord) -> Result<Ack, StoreError> {
        self.ingest_batch(id, std::slice::from_ref(&record)).map(|mut acks| acks.remove(0))
    }

    /// Append several records under one lock acquisition.
    pub fn ingest_batch(&self, id: &str, records: &[CardiacRecord]) -> Result<Vec<Ack>, StoreError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().expect("session lock");
        if e.meta.state != SessionState::Recording {
            return Err(StoreError::State(format!("session {id} is closed")));
        }
        let mut lines = String::new();
        let mut acks = Vec::with_capacity(records.len());
        let mut meta = e.meta.clone();
        for record in records {
            let mut flags = Vec::new();
            if meta.last_timestamp_ms.is_some_and(|last| record.timestamp_ms < last) {
                flags.push(RecordFlag::NonMonotonicTimestamp);
            }
            if record.rri_ms.is_some() && !record.rri_plausible() {
                flags.push(RecordFlag::ImplausibleRri);
            }
            meta.first_timestamp_ms.get_or_insert(record.timestamp_ms);
            meta.last_timestamp_ms = Some(record.timestamp_ms);
            meta.n_records += 1;
            if !flags.is_empty() {
                meta.flagged_records += 1;
            }
            let stored = StoredRecord {
                record: *record,
                flags: flags.clone(),
            };
            lines.push_str(&serde_json::to_string(&stored).map_err(|e| StoreError::Internal(e.to_string()))?);
            lines.push('\n');
            acks.push(Ack { accepted: true, flags });
        }
        let mut file = OpenOptions::new().append(true).create(true).open(self.records_path(id))?;
        file.write_all(lines.as_bytes())?;
        e.meta = meta;
        self.persist_meta(&e.meta)?;
        Ok(acks)
    }

    pub fn close_session(&self, id: &str) -> Result<SessionSummary, StoreError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().expect("session lock");
        if e.meta.state == SessionState::Closed {
            return Err(StoreError::State(format!("session {id} is already closed")));
        }
        e.meta.state = SessionState::Closed;
        self.persist_meta(&e.meta)?;
        Ok(e.meta.summary())
    }

    pub fn meta(&self, id: &str) -> Result<SessionMeta, StoreError> {
        Ok(self.entry(id)?.lock().expect("session lock").meta.clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("store lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn records(&self, id: &str) -> Result<Vec<CardiacRecord>, StoreError> {
        let entry = self.entry(id)?;
        let _e = entry.lock().expect("session lock");
        let file = fs::File::open(self.records_path(id))?;
        BufReader::new(file)
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|(i, line)| {
                let line = line?;
                serde_json::from_str::<StoredRecord>(&line)
                    .map(|s| s.record)
                    .map_err(|e| StoreError::Parse {
                        line: i as u64 + 1,
                        message: e.to_string(),
                    })
            })
            .collect()
    }

    /// Plausible RRI values in stored order; flagged and null beats dropped.
    pub fn rri_series(&self, id: &str) -> Result<Vec<f64>, StoreError> {
        Ok(self
            .records(id)?
            .into_iter()
            .filter(CardiacRecord::rri_plausible)
            .filter_map(|r| r.rri_ms)
            .collect())
    }

    pub fn profile(&self, id: &str) -> Result<Profile, StoreError> {
        let meta = self.meta(id)?;
        let blob = base64::engine::general_purpose::STANDARD
            .decode(&meta.encrypted_profile)
            .map_err(|_| StoreError::Authentication)?;
        decrypt_profile(&self.key, id, &blob)
    }

    pub fn export_csv(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        let meta = self.meta(id)?;
        if meta.state != SessionState::Closed {
            return Err(StoreError::State(format!("session {id} is still recording")));
        }
        Ok(records_to_csv(&self.records(id)?))
    }

    /// Create and close a session in one step from a finished record list.
    pub fn import_session(
        &self,
        profile: &Profile,
        device_kind: DeviceKind,
        records: &[CardiacRecord],
        label: Option<Label>,
    ) -> Result<(String, SessionSummary), StoreError> {
        let id = self.open_session(profile, device_kind)?;
        if !records.is_empty() {
            self.ingest_batch(&id, records)?;
        }
        if label.is_some() {
            self.set_label(&id, label)?;
        }
        let summary = self.close_session(&id)?;
        Ok((id, summary))
    }
}

/// Timestamped records for an RRI series, starting at zero.
pub fn records_from_rri(rri: &[f64]) -> Vec<CardiacRecord> {
    let mut t = 0.0;
    rri.iter()
        .map(|&r| {
            t += r;
            CardiacRecord::rri(t.round() as i64, r)
        })
        .collect()
}
