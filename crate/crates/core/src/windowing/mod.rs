//! Participant-level normalization, sliding windows, cross-validation splits
//! and dataset sources (directory loader and synthetic generator).

mod loader;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use loader::{load_hrv_acc, LoadReport, ReportEntry, MANIFEST_FILE};
pub use split::{split_kfold, split_loocv, Fold, Protocol, SplitPlan};
pub use synth::{synth_dataset, SYNTH_BEATS};

/// Window length used throughout the pipeline.
pub const WINDOW_LEN: usize = 300;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("series of length {0} is too short to normalize")]
    TooShort(usize),
    #[error("degenerate series: zero variance")]
    Degenerate,
    #[error("insufficient data: {got} samples, window needs {need}")]
    InsufficientData { need: usize, got: usize },
    #[error("window stride must be at least 1")]
    BadStride,
    #[error("need at least {need} participants, got {got}")]
    TooFewParticipants { need: usize, got: usize },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Control,
    Treatment,
}

impl Label {
    /// Binary target: treatment is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Control => 0.0,
            Label::Treatment => 1.0,
        }
    }

    pub fn from_probability(p: f64) -> Label {
        if p >= 0.5 {
            Label::Treatment
        } else {
            Label::Control
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Control => "control",
            Label::Treatment => "treatment",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(Label::Control),
            "treatment" => Ok(Label::Treatment),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSeries {
    pub participant_id: String,
    pub rri: Vec<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub values: Vec<f64>,
    pub participant_id: String,
    pub start_index: usize,
}

/// Rescale to zero mean and unit population standard deviation.
pub fn znorm(rri: &[f64]) -> Result<Vec<f64>, WindowError> {
    if rri.len() < 2 {
        return Err(WindowError::TooShort(rri.len()));
    }
    let n = rri.len() as f64;
    let mean = rri.iter().sum::<f64>() / n;
    let var = rri.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    // Relative test so that tiny rounding noise on a constant series still counts as constant.
    let scale = rri.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    if var.sqrt() <= 1e-12 * scale {
        return Err(WindowError::Degenerate);
    }
    let sd = var.sqrt();
    Ok(rri.iter().map(|x| (x - mean) / sd).collect())
}

/// All `len - t + 1` stride-1 windows of an already normalized series.
pub fn make_windows(series: &[f64], t: usize, participant_id: &str) -> Result<Vec<Window>, WindowError> {
    make_windows_strided(series, t, 1, participant_id)
}

pub fn make_windows_strided(
    series: &[f64],
    t: usize,
    stride: usize,
    participant_id: &str,
) -> Result<Vec<Window>, WindowError> {
    if stride == 0 {
        return Err(WindowError::BadStride);
    }
    if t == 0 || series.len() < t {
        return Err(WindowError::InsufficientData {
            need: t,
            got: series.len(),
        });
    }
    Ok((0..=series.len() - t)
        .step_by(stride)
        .map(|start| Window {
            values: series[start..start + t].to_vec(),
            participant_id: participant_id.to_string(),
            start_index: start,
        })
        .collect())
}

/// Start indices of at most `cap` windows spread evenly over the series.
pub fn window_starts(len: usize, t: usize, cap: Option<usize>) -> Result<Vec<usize>, WindowError> {
    if t == 0 || len < t {
        return Err(WindowError::InsufficientData { need: t, got: len });
    }
    let count = len - t + 1;
    Ok(match cap {
        Some(c) if c < count => {
            let c = c.max(1);
            if c == 1 {
                vec![0]
            } else {
                (0..c).map(|i| i * (count - 1) / (c - 1)).collect()
            }
        }
        _ => (0..count).collect(),
    })
}

/// Reassemble a series from stride-1 windows, keeping each sample once.
pub fn reconstruct(windows: &[Window]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for w in windows {
        for (i, &v) in w.values.iter().enumerate() {
            let pos = w.start_index + i;
            if pos >= out.len() {
                out.push(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
