//! Self-adversarial explanations: an attention-derived and a gradient-derived
//! importance map per window, aligned with DTW, whose disagreement marks
//! regions that warrant clinician review.

mod dtw;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hrv::{self, HrvFeatures};
use crate::mstft::{AttentionRecord, Bound, Mode, MstftModel};
use crate::nn::{Graph, NnError, Tensor};
use crate::windowing::Label;

pub use dtw::{dtw, dtw_align, dtw_cost, DtwAlignment};

pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_DELTA: usize = 10;
pub const DEFAULT_FLAG_THRESHOLD: usize = 5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SaeError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Attention,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMap {
    pub values: Vec<f64>,
    pub kind: MapKind,
    pub source_layers: Vec<String>,
}

/// How a `[queries, keys]` attention matrix becomes one value per position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionReduction {
    /// Attention received by each key position.
    #[default]
    MeanOverQueries,
    /// Mean attention paid by each query position (rows sum to one, so
    /// this is constant unless the matrix is masked).
    MeanOverKeys,
}

/// Class whose score the gradient map explains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// Always the treatment logit.
    Positive,
    /// The predicted class: the logit, negated for a control prediction.
    #[default]
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeConfig {
    pub rho: f64,
    pub delta: usize,
    pub flag_threshold: usize,
    pub reduction: AttentionReduction,
    pub target: GradTarget,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            delta: DEFAULT_DELTA,
            flag_threshold: DEFAULT_FLAG_THRESHOLD,
            reduction: AttentionReduction::default(),
            target: GradTarget::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRegion {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub peak: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hrv: Option<HrvFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeResult {
    pub e_attn: Vec<f64>,
    pub e_attn_aligned: Vec<f64>,
    pub e_grad: Vec<f64>,
    pub d_map: Vec<f64>,
    pub regions: Vec<DiscrepancyRegion>,
    pub flagged: bool,
    pub probability: f64,
    pub predicted: Label,
}

/// Linear interpolation of an `l`-point map onto `t` points, endpoints pinned.
pub fn expand(map: &[f64], t: usize) -> Result<Vec<f64>, SaeError> {
    let l = map.len();
    if l == 0 || t == 0 {
        return Err(SaeError::Empty);
    }
    if l > t {
        return Err(SaeError::Contract(format!("cannot expand {l} points onto {t}")));
    }
    if l == t {
        return Ok(map.to_vec());
    }
    if t == 1 || l == 1 {
        return Ok(vec![map[0]; t]);
    }
    let scale = (l - 1) as f64 / (t - 1) as f64;
    Ok((0..t)
        .map(|j| {
            let pos = j as f64 * scale;
            let i = (pos.floor() as usize).min(l - 2);
            let frac = pos - i as f64;
            map[i] * (1.0 - frac) + map[i + 1] * frac
        })
        .collect())
}

/// z-score then min-max to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_map(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(sd > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return vec![0.5; v.len()];
    }
    let z: Vec<f64> = v.iter().map(|x| (x - mean) / sd).collect();
    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    z.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Head-averaged, axis-reduced map of one window of one attention record.
pub fn attention_vector(record: &AttentionRecord, batch: usize, reduction: AttentionReduction) -> Result<Vec<f64>, SaeError> {
    let [b, h, lq, lk] = record.shape[..] else {
        return Err(SaeError::Contract(format!("attention shape {:?} is not 4-D", record.shape)));
    };
    if batch >= b || record.weights.len() != b * h * lq * lk {
        return Err(SaeError::Contract(format!("batch {batch} outside attention record {:?}", record.shape)));
    }
    let base = batch * h * lq * lk;
    let (len, denom) = match reduction {
        AttentionReduction::MeanOverQueries => (lk, (h * lq) as f64),
        AttentionReduction::MeanOverKeys => (lq, (h * lk) as f64),
    };
    let mut out = vec![0.0; len];
    for head in 0..h {
        for q in 0..lq {
            let row = &record.weights[base + (head * lq + q) * lk..][..lk];
            match reduction {
                AttentionReduction::MeanOverQueries => out.iter_mut().zip(row).for_each(|(o, w)| *o += w),
                AttentionReduction::MeanOverKeys => out[q] += row.iter().sum::<f64>(),
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= denom);
    Ok(out)
}

/// Attention map from recorded layers: per-layer reduction, layer mean,
/// expansion to `t`, normalization.
pub fn attention_map(records: &[AttentionRecord], batch: usize, t: usize, reduction: AttentionReduction) -> Result<ExplanationMap, SaeError> {
    if records.is_empty() {
        return Err(SaeError::Contract("no attention layers recorded".into()));
    }
    let vectors = records
        .iter()
        .map(|r| attention_vector(r, batch, reduction))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = layer_mean(&vectors)?;
    Ok(ExplanationMap {
        values: normalize_map(&expand(&mean, t)?),
        kind: MapKind::Attention,
        source_layers: records.iter().map(|r| r.layer.to_string()).collect(),
    })
}

fn layer_mean(vectors: &[Vec<f64>]) -> Result<Vec<f64>, SaeError> {
    let len = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(SaeError::Length {
            expected: len,
            got: v.len(),
        });
    }
    let k = vectors.len() as f64;
    Ok((0..len).map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / k).collect())
}

/// Class-activation map of one `[L, C]` activation given its gradient:
/// channel weights are the positional mean of the gradient.
pub fn grad_cam(activation: &Tensor, gradient: &Tensor) -> Result<Vec<f64>, SaeError> {
    if activation.shape() != gradient.shape() {
        return Err(SaeError::Contract(format!(
            "activation {:?} and gradient {:?} differ in shape",
            activation.shape(),
            gradient.shape()
        )));
    }
    let c = activation.last_dim();
    let l = activation.rows();
    if l == 0 || c == 0 {
        return Err(SaeError::Empty);
    }
    let mut alpha = vec![0.0; c];
    for row in gradient.data().chunks(c) {
        alpha.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    alpha.iter_mut().for_each(|a| *a /= l as f64);
    Ok(activation
        .data()
        .chunks(c)
        .map(|row| row.iter().zip(&alpha).map(|(f, a)| f * a).sum::<f64>().max(0.0))
        .collect())
}

fn check_window(model: &MstftModel, window: &[f64]) -> Result<(), SaeError> {
    if window.len() != model.hyper.t {
        return Err(SaeError::Length {
            expected: model.hyper.t,
            got: window.len(),
        });
    }
    Ok(())
}

pub fn attention_explanation(model: &MstftModel, window: &[f64], reduction: AttentionReduction) -> Result<ExplanationMap, SaeError> {
    check_window(model, window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = model.forward(&[window], Mode::Eval, &mut rng)?;
    attention_map(&trace.attention, 0, window.len(), reduction)
}

/// Gradient map plus the window's probability.
pub fn gradient_explanation(model: &MstftModel, window: &[f64], target: GradTarget) -> Result<(ExplanationMap, f64), SaeError> {
    check_window(model, window)?;
    let mut g = Graph::new();
    // The input carries gradients so that every activation downstream gets one.
    let x = g.leaf(model.input_tensor(&[window])?, true);
    let bound = Bound::bind(&model.params, &mut g, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tr = model.build(&mut g, &bound, x, Mode::Eval, &mut rng)?;
    let prob = g.value(tr.prob).item();
    let score = match target {
        GradTarget::Predicted if Label::from_probability(prob) == Label::Control => g.scale(tr.logit, -1.0)?,
        _ => tr.logit,
    };
    let score = g.sum(score)?;
    let grads = g.backward(score)?;
    let sites = [("fusion", tr.fusion_out), ("self_attention", tr.self_out)];
    let mut maps = Vec::new();
    for (name, var) in sites {
        let grad = grads
            .get(var)
            .ok_or_else(|| SaeError::Contract(format!("no gradient recorded at `{name}`")))?;
        let act = g.value(var);
        let (l, c) = (act.shape()[1], act.last_dim());
        let act = act.clone().reshape(&[l, c])?;
        let grad = grad.clone().reshape(&[l, c])?;
        maps.push(grad_cam(&act, &grad)?);
    }
    let mean = layer_mean(&maps)?;
    Ok((
        ExplanationMap {
            values: normalize_map(&expand(&mean, window.len())?),
            kind: MapKind::Gradient,
            source_layers: sites.iter().map(|(n, _)| n.to_string()).collect(),
        },
        prob,
    ))
}

/// Contiguous regions of `d > rho`, merging runs separated by at most
/// `delta` unmasked samples.
pub fn regions_from_map(d_map: &[f64], rho: f64, delta: usize) -> Vec<DiscrepancyRegion> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < d_map.len() {
        if d_map[i] > rho {
            let start = i;
            while i + 1 < d_map.len() && d_map[i + 1] > rho {
                i += 1;
            }
            runs.push((start, i));
        }
        i += 1;
    }
    merge_runs(&runs, delta)
        .into_iter()
        .map(|(start, end)| DiscrepancyRegion {
            start,
            end,
            peak: d_map[start..=end].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            hrv: None,
        })
        .collect()
}

/// Merge sorted, disjoint inclusive runs whose gap is at most `delta`.
pub fn merge_runs(runs: &[(usize, usize)], delta: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(s, e) in runs {
        match out.last_mut() {
            Some(last) if s <= last.1 + 1 + delta => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

pub fn discrepancy(e_attn_aligned: &[f64], e_grad: &[f64], rho: f64, delta: usize) -> Result<(Vec<f64>, Vec<DiscrepancyRegion>), SaeError> {
    if e_attn_aligned.len() != e_grad.len() {
        return Err(SaeError::Length {
            expected: e_grad.len(),
            got: e_attn_aligned.len(),
        });
    }
    let d: Vec<f64> = e_attn_aligned.iter().zip(e_grad).map(|(a, g)| (a - g).abs()).collect();
    let regions = regions_from_map(&d, rho, delta);
    Ok((d, regions))
}

pub fn flag(regions: &[DiscrepancyRegion], threshold: usize) -> bool {
    regions.len() > threshold
}

/// Both maps, their alignment, discrepancy regions and the review flag for
/// one normalized window.
pub fn explain(model: &MstftModel, window: &[f64], cfg: &SaeConfig) -> Result<SaeResult, SaeError> {
    let e_attn = attention_explanation(model, window, cfg.reduction)?;
    let (e_grad, probability) = gradient_explanation(model, window, cfg.target)?;
    let aligned = dtw_align(&e_attn.values, &e_grad.values)?;
    let (d_map, regions) = discrepancy(&aligned, &e_grad.values, cfg.rho, cfg.delta)?;
    Ok(SaeResult {
        e_attn: e_attn.values,
        e_attn_aligned: aligned,
        e_grad: e_grad.values,
        d_map,
        flagged: flag(&regions, cfg.flag_threshold),
        regions,
        probability,
        predicted: Label::from_probability(probability),
    })
}

/// Fill each region's HRV record from the raw RR intervals (ms) underlying
/// the explained window. Regions too short for a metric keep `None`.
pub fn attach_region_hrv(result: &mut SaeResult, raw_rri: &[f64]) {
    for r in &mut result.regions {
        r.hrv = hrv::region_metrics(raw_rri, &[(r.start, r.end)]).ok().and_then(|mut v| v.pop());
    }
}

/// Recording-level map: each position averages the maps of every window
/// covering it. Uncovered positions are `None`.
pub fn aggregate_windows(maps: &[(usize, &[f64])], len: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (start, map) in maps {
        for (i, v) in map.iter().enumerate() {
            if let Some(s) = sum.get_mut(start + i) {
                *s += v;
                count[start + i] += 1;
            }
        }
    }
    sum.into_iter().zip(count).map(|(s, c)| (c > 0).then(|| s / c as f64)).collect()
}

#[cfg(test)]
mod tests;
