use std::io::Read;
use std::time::Duration;

use super::{CardiacRecord, StoreError};

pub const CSV_HEADER: &str = "timestamp_ms,rri_ms,hr_bpm,ecg_uv";

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn records_to_csv(records: &[CardiacRecord]) -> Vec<u8> {
    let mut out = String::with_capacity(32 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.timestamp_ms,
            field(r.rri_ms),
            field(r.hr_bpm),
            field(r.ecg_uv)
        ));
    }
    out.into_bytes()
}

fn parse_opt(raw: &str, line: u64, name: &str) -> Result<Option<f64>, StoreError> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| StoreError::Parse {
            line,
            message: format!("invalid {name} `{raw}`"),
        })
}

/// Parse session CSV; errors carry the 1-based line number.
pub fn records_from_csv(source: impl Read) -> Result<Vec<CardiacRecord>, StoreError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(source);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| StoreError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(i as u64 + 1),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if i == 0 {
            if row.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
                return Err(StoreError::Parse {
                    line,
                    message: format!("expected header `{CSV_HEADER}`"),
                });
            }
            continue;
        }
        if row.len() != 4 {
            return Err(StoreError::Parse {
                line,
                message: format!("expected 4 fields, found {}", row.len()),
            });
        }
        let timestamp_ms = row[0].parse::<i64>().map_err(|_| StoreError::Parse {
            line,
            message: format!("invalid timestamp_ms `{}`", &row[0]),
        })?;
        out.push(CardiacRecord {
            timestamp_ms,
            rri_ms: parse_opt(&row[1], line, "rri_ms")?,
            hr_bpm: parse_opt(&row[2], line, "hr_bpm")?,
            ecg_uv: parse_opt(&row[3], line, "ecg_uv")?,
        });
    }
    if out.is_empty() && reader.position().line() <= 1 {
        return Err(StoreError::Parse {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(out)
}

/// Records in timestamp order, each paired with the delay to wait before
/// emitting it. An infinite speed factor gives zero delays.
pub fn replay_schedule(mut records: Vec<CardiacRecord>, speed_factor: f64) -> Result<Vec<(Duration, CardiacRecord)>, StoreError> {
    if speed_factor.is_nan() || speed_factor <= 0.0 {
        return Err(StoreError::Validation(format!("speed factor must be positive, got {speed_factor}")));
    }
    records.sort_by_key(|r| r.timestamp_ms);
    let mut prev = records.first().map(|r| r.timestamp_ms).unwrap_or(0);
    Ok(records
        .into_iter()
        .map(|r| {
            let gap_ms = (r.timestamp_ms - prev).max(0) as f64;
            prev = r.timestamp_ms;
            let delay = if speed_factor.is_infinite() {
                Duration::ZERO
            } else {
                Duration::from_secs_f64(gap_ms / 1000.0 / speed_factor)
            };
            (delay, r)
        })
        .collect())
}

/// Blocking replay of a CSV source into `sink`, sleeping between records.
pub fn replay(source: impl Read, speed_factor: f64, mut sink: impl FnMut(CardiacRecord)) -> Result<usize, StoreError> {
    let schedule = replay_schedule(records_from_csv(source)?, speed_factor)?;
    let n = schedule.len();
    for (delay, record) in schedule {
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        sink(record);
    }
    Ok(n)
}
