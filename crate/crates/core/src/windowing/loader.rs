use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Label, ParticipantSeries, WindowError};
use crate::signal_store::{RRI_MAX_MS, RRI_MIN_MS};

/// Optional `file,label` table overriding filename-prefix labels.
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub excluded: Vec<ReportEntry>,
    pub dropped_implausible: usize,
    pub warnings: Vec<String>,
}

fn label_from_name(name: &str) -> Option<Label> {
    let lower = name.to_ascii_lowercase();
    if lower.starts_with("control") {
        Some(Label::Control)
    } else if lower.starts_with("treatment") {
        Some(Label::Treatment)
    } else {
        None
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split([',', ';', '\t', ' ']).map(str::trim).collect()
}

/// RRI values from a per-participant file: either a bare column of numbers
/// or a delimited table whose header names an `rri`/`rri_ms` column.
fn parse_rri(text: &str) -> Result<(Vec<f64>, usize), String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let mut column = 0;
    if let Some((_, first)) = lines.peek() {
        if first.chars().any(|c| c.is_ascii_alphabetic()) && first.trim().parse::<f64>().is_err() {
            let fields = split_fields(first);
            column = fields
                .iter()
                .position(|f| matches!(f.to_ascii_lowercase().as_str(), "rri_ms" | "rri" | "rr" | "rr_ms"))
                .unwrap_or(0);
            lines.next();
        }
    }
    let mut out = Vec::new();
    let mut dropped = 0;
    for (i, line) in lines {
        let fields = split_fields(line);
        let raw = fields.get(column).copied().unwrap_or("");
        if raw.is_empty() {
            continue;
        }
        let v: f64 = raw.parse().map_err(|_| format!("line {}: cannot parse `{raw}`", i + 1))?;
        if (RRI_MIN_MS..=RRI_MAX_MS).contains(&v) {
            out.push(v);
        } else {
            dropped += 1;
        }
    }
    Ok((out, dropped))
}

fn read_manifest(path: &Path) -> Result<HashMap<String, Label>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.to_ascii_lowercase().starts_with("file")) {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| format!("{MANIFEST_FILE} line {}: expected `file,label`", i + 1))?;
        let label = label.parse().map_err(|e| format!("{MANIFEST_FILE} line {}: {e}", i + 1))?;
        map.insert(file.trim().to_string(), label);
    }
    Ok(map)
}

/// Load one RRI file per participant from `dir`.
///
/// Implausible beats are dropped and the rest treated as contiguous.
/// Unlabelled, unreadable or shorter-than-`min_len` files are excluded and
/// listed in the report; they never abort the load.
pub fn load_hrv_acc(dir: &Path, min_len: usize) -> Result<(Vec<ParticipantSeries>, LoadReport), WindowError> {
    if !dir.is_dir() {
        return Err(WindowError::NotFound(dir.display().to_string()));
    }
    let mut report = LoadReport::default();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        read_manifest(&manifest_path).map_err(WindowError::Io)?
    } else {
        HashMap::new()
    };
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| WindowError::Io(e.to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    files.sort();

    let mut out = Vec::new();
    for path in files {
        let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(label) = manifest.get(&file).copied().or_else(|| label_from_name(&file)) else {
            report.excluded.push(ReportEntry {
                file,
                reason: "no control/treatment label".into(),
            });
            continue;
        };
        let parsed = fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| parse_rri(&t));
        match parsed {
            Err(reason) => report.excluded.push(ReportEntry { file, reason }),
            Ok((rri, dropped)) => {
                report.dropped_implausible += dropped;
                if rri.len() < min_len {
                    report.excluded.push(ReportEntry {
                        file,
                        reason: format!("{} beats, fewer than {min_len}", rri.len()),
                    });
                } else {
                    out.push(ParticipantSeries {
                        participant_id: stem,
                        rri,
                        label,
                    });
                }
            }
        }
    }
    report.loaded = out.len();
    if out.is_empty() {
        report.warnings.push(format!("no participant series loaded from {}", dir.display()));
    }
    Ok((out, report))
}
