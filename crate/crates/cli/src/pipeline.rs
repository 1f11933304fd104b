use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use heart2mind_core::contest::{CaseInput, ContestError, ContestService, PatientProfile};
use heart2mind_core::hrv::{self, HrvError, HrvFeatures};
use heart2mind_core::mstft::MstftModel;
use heart2mind_core::nn::NnError;
use heart2mind_core::sae::{self, SaeConfig, SaeError, SaeResult};
use heart2mind_core::signal_store::{Sex, SignalStore, StoreError};
use heart2mind_core::trainer::{aggregate_probability, TrainError};
use heart2mind_core::windowing::{window_starts, znorm, Label, WindowError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("insufficient data: need at least {need} beats, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sae(#[from] SaeError),
    #[error(transparent)]
    Hrv(#[from] HrvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Contest(#[from] ContestError),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

/// Per-window probabilities of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub starts: Vec<usize>,
    pub windows: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Z-normalize the recording, cut up to `max_windows` evenly spaced windows and score them.
pub fn score_windows(model: &MstftModel, raw_rri: &[f64], max_windows: usize) -> Result<Scored, PipelineError> {
    let t = model.hyper.t;
    if raw_rri.len() < t {
        return Err(PipelineError::InsufficientData {
            need: t,
            got: raw_rri.len(),
        });
    }
    let z = znorm(raw_rri)?;
    let starts = window_starts(z.len(), t, Some(max_windows))?;
    let windows: Vec<Vec<f64>> = starts.iter().map(|&s| z[s..s + t].to_vec()).collect();
    let mut probs = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(16) {
        let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        probs.extend(model.predict(&refs)?);
    }
    Ok(Scored { starts, windows, probs })
}

/// Index of the window whose probability is furthest from 0.5 (first on ties),
/// or the requested one.
pub fn select_window(probs: &[f64], requested: Option<usize>) -> Result<usize, PipelineError> {
    if let Some(k) = requested {
        if k >= probs.len() {
            return Err(PipelineError::Validation(format!(
                "window {k} out of range (0..{})",
                probs.len()
            )));
        }
        return Ok(k);
    }
    probs
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, p)| {
            let m = (p - 0.5).abs();
            match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((i, m)),
            }
        })
        .map(|(i, _)| i)
        .ok_or_else(|| PipelineError::Validation("no windows to explain".into()))
}

/// SAE on window `index`, with per-region HRV from the raw beats it covers.
pub fn explain_window(
    model: &MstftModel,
    raw_rri: &[f64],
    scored: &Scored,
    index: usize,
    cfg: &SaeConfig,
) -> Result<SaeResult, PipelineError> {
    let start = scored.starts[index];
    let mut result = sae::explain(model, &scored.windows[index], cfg)?;
    sae::attach_region_hrv(&mut result, &raw_rri[start..start + model.hyper.t]);
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisBundle {
    pub schema_version: u32,
    pub session_id: String,
    pub prediction: Label,
    pub probability: f64,
    pub window_starts: Vec<usize>,
    pub window_probabilities: Vec<f64>,
    /// Window the explanation was computed on.
    pub explained_window: usize,
    pub explained_start: usize,
    /// Region indices are relative to `explained_start`.
    pub sae: SaeResult,
    pub f_r: HrvFeatures,
    /// Region metrics, segments in recording beat indices.
    pub f_d: Vec<HrvFeatures>,
    pub case_id: String,
    pub model_checksum: String,
    pub created_at: DateTime<Utc>,
}

pub struct Pipeline {
    pub store: Arc<SignalStore>,
    pub model: Arc<MstftModel>,
    pub contest: Arc<ContestService>,
    pub sae: SaeConfig,
    pub max_windows: usize,
    pub bundles_dir: PathBuf,
    pub model_checksum: String,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Pipeline {
    pub fn new(
        store: Arc<SignalStore>,
        model: Arc<MstftModel>,
        contest: Arc<ContestService>,
        sae: SaeConfig,
        max_windows: usize,
        bundles_dir: PathBuf,
    ) -> Result<Self, PipelineError> {
        fs::create_dir_all(&bundles_dir)?;
        let model_checksum = heart2mind_core::mstft::model_checksum(&model);
        Ok(Self {
            store,
            model,
            contest,
            sae,
            max_windows,
            bundles_dir,
            model_checksum,
            locks: Mutex::new(HashMap::new()),
        })
    }

    fn bundle_path(&self, session_id: &str) -> Result<PathBuf, PipelineError> {
        if session_id.is_empty() || !session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(PipelineError::Validation(format!("invalid session id `{session_id}`")));
        }
        Ok(self.bundles_dir.join(format!("{session_id}.json")))
    }

    pub fn load_bundle(&self, session_id: &str) -> Result<Option<DiagnosisBundle>, PipelineError> {
        let path = self.bundle_path(session_id)?;
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Diagnose a closed session and open a contest case for it. A stored
    /// bundle is returned as is unless `fresh` is set or another window is requested.
    pub fn run(&self, session_id: &str, window: Option<usize>, fresh: bool) -> Result<DiagnosisBundle, PipelineError> {
        let lock = {
            let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
            locks.entry(session_id.to_string()).or_default().clone()
        };
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        if !fresh {
            if let Some(b) = self.load_bundle(session_id)? {
                if window.is_none_or(|w| w == b.explained_window) && b.model_checksum == self.model_checksum {
                    return Ok(b);
                }
            }
        }
        let raw = self.store.rri_series(session_id)?;
        let meta = self.store.meta(session_id)?;
        if meta.state != heart2mind_core::signal_store::SessionState::Closed {
            return Err(StoreError::State(format!("session {session_id} is still recording")).into());
        }
        let scored = score_windows(&self.model, &raw, self.max_windows)?;
        let (probability, prediction) = aggregate_probability(&scored.probs)?;
        let index = select_window(&scored.probs, window)?;
        let sae = explain_window(&self.model, &raw, &scored, index, &self.sae)?;
        let start = scored.starts[index];
        let f_r = hrv::baseline_metrics(&raw)?;
        let f_d: Vec<HrvFeatures> = sae
            .regions
            .iter()
            .filter_map(|r| hrv::region_metrics(&raw, &[(start + r.start, start + r.end)]).ok()?.pop())
            .collect();
        let profile = self.store.profile(session_id)?;
        let case = self.contest.open_case(CaseInput {
            session_ref: session_id.to_string(),
            baseline_prediction: prediction,
            baseline_probability: probability,
            f_r: f_r.clone(),
            f_d: f_d.clone(),
            sae_flagged: sae.flagged,
            profile: Some(PatientProfile {
                age: Some(profile.age),
                sex: (profile.sex != Sex::Undisclosed).then_some(profile.sex),
            }),
        })?;
        let bundle = DiagnosisBundle {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.to_string(),
            prediction,
            probability,
            window_starts: scored.starts,
            window_probabilities: scored.probs,
            explained_window: index,
            explained_start: start,
            sae,
            f_r,
            f_d,
            case_id: case.case_id,
            model_checksum: self.model_checksum.clone(),
            created_at: Utc::now(),
        };
        let path = self.bundle_path(session_id)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&bundle).map_err(|e| PipelineError::Io(e.to_string()))?)?;
        fs::rename(&tmp, &path)?;
        log::info!(
            "diagnosed session {session_id}: {prediction} (p={probability:.3}), {} SAE regions, case {}",
            bundle.sae.regions.len(),
            bundle.case_id
        );
        Ok(bundle)
    }
}
