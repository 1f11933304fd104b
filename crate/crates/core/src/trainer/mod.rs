//! Loss, optimizer, training loop, participant-level aggregation and the
//! cross-validation harness.

mod cv;
mod metrics;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mstft::{Bound, Mode, MstftModel};
use crate::nn::{Graph, NnError, ParamStore, Tensor};
use crate::windowing::{self, Label, ParticipantSeries, Window, WindowError};

pub use cv::{run_cv, AggregateMetrics, CvOutcome, EvalReport, FoldReport, ParticipantPrediction};
pub use metrics::{bce_loss, confusion_metrics, roc_auc, ClassMetrics, Confusion, MetricFlag, BCE_EPS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("AUC is undefined when only one class is present")]
    UndefinedAuc,
    #[error("no windows to score")]
    NoWindows,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Evenly spaced windows kept per participant (train and test); all
    /// stride-1 windows when unset.
    pub max_windows_per_participant: Option<usize>,
    /// Share of training windows held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-5,
            weight_decay: 1e-5,
            seed: 0,
            early_stop_patience: 10,
            max_windows_per_participant: None,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Budget that trains the desk model preset on one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            max_windows_per_participant: Some(24),
            early_stop_patience: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and non-negative");
        }
        if !(0.0..0.9).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 0.9)");
        }
        if self.max_windows_per_participant == Some(0) {
            return bad("max_windows_per_participant must be positive");
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<(), TrainError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.len() != grad.len() {
                return Err(NnError::Shape(format!("gradient for `{name}` has {} values, parameter {}", grad.len(), p.len())).into());
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + self.weight_decay * *w;
                *w -= self.lr * update;
            }
        }
        Ok(())
    }
}

/// Per-participant z-normalized windows at evenly spread start positions.
pub fn participant_windows(series: &ParticipantSeries, t: usize, cap: Option<usize>) -> Result<Vec<Window>, TrainError> {
    let z = windowing::znorm(&series.rri)?;
    let starts = windowing::window_starts(z.len(), t, cap)?;
    Ok(starts
        .into_iter()
        .map(|s| Window {
            values: z[s..s + t].to_vec(),
            participant_id: series.participant_id.clone(),
            start_index: s,
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
    /// Inner-validation loss per epoch (empty when disabled).
    pub val_history: Vec<f64>,
    /// Epoch whose parameters were kept, when validation is enabled.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
}

fn mean_bce(probs: &[f64], targets: &[f64]) -> f64 {
    probs.iter().zip(targets).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / probs.len().max(1) as f64
}

/// One optimizer step on a mini-batch; returns the batch loss.
fn train_step(model: &mut MstftModel, opt: &mut AdamW, batch: &[&[f64]], targets: &[f64]) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let x = g.constant(model.input_tensor(batch)?);
    let bound = Bound::bind(&model.params, &mut g, true)?;
    let mut rng = model.rng.clone();
    let tr = model.build(&mut g, &bound, x, Mode::Train, &mut rng)?;
    model.rng = rng;
    let loss = g.bce(tr.prob, targets, BCE_EPS)?;
    let loss_value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let named: Vec<(String, Tensor)> = bound
        .iter()
        .filter_map(|(name, v)| grads.take(v).map(|t| (name.to_string(), t)))
        .collect();
    let stats = tr.batch_stats;
    drop(bound);
    drop(g);
    opt.step(&mut model.params, &named)?;
    if let Some(s) = stats {
        if batch.len() >= 2 {
            model.update_running_stats(&s.mean, &s.var);
        }
    }
    Ok(loss_value)
}

/// Train on the windows of `participants`. Deterministic given `config.seed`:
/// the window order, the validation split and every stochastic draw inside
/// the model come from generators seeded here.
pub fn train(model: &mut MstftModel, participants: &[ParticipantSeries], config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if participants.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let has = |l: Label| participants.iter().any(|p| p.label == l);
    if !has(Label::Control) || !has(Label::Treatment) {
        return Err(TrainError::Config("training set must contain both classes".into()));
    }
    let t = model.hyper.t;
    let mut samples: Vec<(Vec<f64>, f64)> = Vec::new();
    for p in participants {
        for w in participant_windows(p, t, config.max_windows_per_participant)? {
            samples.push((w.values, p.label.target()));
        }
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model_rng = ChaCha8Rng::seed_from_u64(config.seed);
    model_rng.set_stream(1);
    model.rng = model_rng;

    let n_val = if config.validation_fraction > 0.0 {
        let n = (config.validation_fraction * samples.len() as f64).round() as usize;
        n.min(samples.len().saturating_sub(1))
    } else {
        0
    };
    samples.shuffle(&mut order_rng);
    let val: Vec<(Vec<f64>, f64)> = samples.drain(..n_val).collect();
    let val_refs: Vec<&[f64]> = val.iter().map(|(w, _)| w.as_slice()).collect();
    let val_targets: Vec<f64> = val.iter().map(|(_, y)| *y).collect();

    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut out = TrainOutcome {
        n_train_windows: samples.len(),
        n_val_windows: val.len(),
        ..TrainOutcome::default()
    };
    let mut best: Option<(f64, ParamStore, ParamStore)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].0.as_slice()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| samples[i].1).collect();
            total += train_step(model, &mut opt, &batch, &targets)? * chunk.len() as f64;
        }
        let epoch_loss = total / samples.len() as f64;
        out.loss_history.push(epoch_loss);
        if val.is_empty() {
            log::debug!("epoch {epoch}: loss {epoch_loss:.4}");
            continue;
        }
        let val_loss = mean_bce(&model.predict(&val_refs)?, &val_targets);
        out.val_history.push(val_loss);
        log::debug!("epoch {epoch}: loss {epoch_loss:.4} val {val_loss:.4}");
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone(), model.buffers.clone()));
            out.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                out.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params, buffers)) = best {
        model.params = params;
        model.buffers = buffers;
    }
    Ok(out)
}

/// Mean window probability; treatment when it reaches 0.5.
pub fn predict_participant(model: &MstftModel, windows: &[&[f64]]) -> Result<(f64, Label), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let probs = model.predict(windows)?;
    aggregate_probability(&probs)
}

/// Participant-level decision from window probabilities.
pub fn aggregate_probability(probs: &[f64]) -> Result<(f64, Label), TrainError> {
    if probs.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let p = probs.iter().sum::<f64>() / probs.len() as f64;
    Ok((p, Label::from_probability(p)))
}

#[cfg(test)]
mod tests;
