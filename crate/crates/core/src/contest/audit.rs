use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ContestError;

pub const GENESIS_DIGEST: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    pub kind: String,
    pub payload: serde_json::Value,
    pub prev_digest: String,
    pub digest: String,
}

impl AuditEntry {
    /// SHA-256 over the entry with its own digest left out.
    pub fn compute_digest(&self) -> String {
        let body = serde_json::json!({
            "seq": self.seq,
            "ts": self.ts,
            "kind": self.kind,
            "payload": self.payload,
            "prev_digest": self.prev_digest,
        });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }
}

#[derive(Debug)]
struct Tail {
    seq: u64,
    digest: String,
}

/// Append-only ND-JSON log where each entry commits to its predecessor.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    tail: Mutex<Tail>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ContestError {
    ContestError::Io(format!("{}: {e}", path.display()))
}

impl AuditLog {
    /// Open (or create) a log, verifying any existing chain first.
    pub fn open(path: &Path) -> Result<Self, ContestError> {
        let tail = if path.exists() {
            let entries = read_entries(path)?;
            verify_chain(&entries)?;
            entries.last().map_or_else(
                || Tail {
                    seq: 0,
                    digest: GENESIS_DIGEST.into(),
                },
                |e| Tail {
                    seq: e.seq,
                    digest: e.digest.clone(),
                },
            )
        } else {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            Tail {
                seq: 0,
                digest: GENESIS_DIGEST.into(),
            }
        };
        Ok(Self {
            path: path.to_path_buf(),
            tail: Mutex::new(tail),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append an event; returns its sequence number (starting at 1).
    pub fn append(&self, kind: &str, payload: serde_json::Value) -> Result<u64, ContestError> {
        let mut tail = self.tail.lock().unwrap_or_else(|p| p.into_inner());
        let mut entry = AuditEntry {
            seq: tail.seq + 1,
            ts: Utc::now(),
            kind: kind.to_string(),
            payload,
            prev_digest: tail.digest.clone(),
            digest: String::new(),
        };
        entry.digest = entry.compute_digest();
        let line = serde_json::to_string(&entry).map_err(|e| ContestError::Internal(e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| io_err(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(&self.path, e))?;
        f.sync_data().map_err(|e| io_err(&self.path, e))?;
        tail.seq = entry.seq;
        tail.digest = entry.digest;
        Ok(tail.seq)
    }

    pub fn entries(&self) -> Result<Vec<AuditEntry>, ContestError> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        read_entries(&self.path)
    }

    /// Number of verified entries.
    pub fn verify(&self) -> Result<usize, ContestError> {
        let entries = self.entries()?;
        verify_chain(&entries)?;
        Ok(entries.len())
    }
}

pub fn read_entries(path: &Path) -> Result<Vec<AuditEntry>, ContestError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ContestError::Parse(format!("audit line {}: {e}", i + 1)))
        })
        .collect()
}

/// Checks sequence numbers and that every entry's `prev_digest` matches the
/// recomputed digest of the entry before it. Tampering with entry `k` is
/// reported at entry `k + 1` (or at `k` when it is the last entry).
pub fn verify_chain(entries: &[AuditEntry]) -> Result<(), ContestError> {
    let mut expected_prev = GENESIS_DIGEST.to_string();
    for (i, e) in entries.iter().enumerate() {
        let seq = i as u64 + 1;
        if e.seq != seq || e.prev_digest != expected_prev {
            return Err(ContestError::AuditChain { seq });
        }
        expected_prev = e.compute_digest();
    }
    if let Some(last) = entries.last() {
        if last.digest != expected_prev {
            return Err(ContestError::AuditChain { seq: last.seq });
        }
    }
    Ok(())
}
