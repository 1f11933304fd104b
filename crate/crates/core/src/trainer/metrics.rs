use serde::{Deserialize, Serialize};

use super::TrainError;

/// Clamp applied to probabilities before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy of one probability against a 0/1 target.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Tally `(truth, predicted)` pairs where `true` is the treatment class.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (truth, pred) in pairs {
            match (truth, pred) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn metrics(&self) -> ClassMetrics {
        confusion_metrics(self.tp, self.tn, self.fp, self.fn_)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// No counts at all; every metric is reported as 0.
    NoSamples,
    /// tp + fp = 0.
    PrecisionUndefined,
    /// tp + fn = 0.
    RecallUndefined,
    /// precision + recall = 0.
    F1Undefined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<MetricFlag>,
}

/// Accuracy, precision, recall and F1. Undefined ratios are reported as 0
/// and flagged.
pub fn confusion_metrics(tp: usize, tn: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let mut flags = Vec::new();
    let total = tp + tn + fp + fn_;
    if total == 0 {
        flags.push(MetricFlag::NoSamples);
    }
    let ratio = |num: usize, den: usize, flag: MetricFlag, flags: &mut Vec<MetricFlag>| {
        if den == 0 {
            flags.push(flag);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = if total == 0 { 0.0 } else { (tp + tn) as f64 / total as f64 };
    let precision = ratio(tp, tp + fp, MetricFlag::PrecisionUndefined, &mut flags);
    let recall = ratio(tp, tp + fn_, MetricFlag::RecallUndefined, &mut flags);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        flags.push(MetricFlag::F1Undefined);
        0.0
    };
    ClassMetrics {
        accuracy,
        precision,
        recall,
        f1,
        flags,
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64, TrainError> {
    if scores.len() != positive.len() {
        return Err(TrainError::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TrainError::Config("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::UndefinedAuc);
    }
    // Rank-sum form: sort once, average ranks over ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
