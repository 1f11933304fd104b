use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{roc_auc, ClassMetrics, Confusion, MetricFlag};
use super::{aggregate_probability, participant_windows, train, TrainConfig, TrainError, TrainOutcome};
use crate::mstft::{Hyperparams, MstftModel};
use crate::windowing::{split_kfold, split_loocv, Label, ParticipantSeries, Protocol};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPrediction {
    pub participant_id: String,
    pub fold: usize,
    pub label: Label,
    pub probability: f64,
    pub predicted: Label,
    pub n_windows: usize,
}

impl ParticipantPrediction {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test: Vec<String>,
    pub confusion: Confusion,
    pub metrics: ClassMetrics,
    /// Absent when the fold's test set holds a single class.
    pub auc: Option<f64>,
    pub training: TrainOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<MetricFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub per_fold: Vec<FoldReport>,
    pub aggregate: AggregateMetrics,
    /// Pooled over every held-out participant.
    pub confusion: Confusion,
    pub per_participant: Vec<ParticipantPrediction>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// A report together with the model trained for each fold.
pub struct CvOutcome {
    pub report: EvalReport,
    pub models: Vec<MstftModel>,
}

fn auc_of(preds: &[&ParticipantPrediction]) -> Option<f64> {
    let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
    let positive: Vec<bool> = preds.iter().map(|p| p.label == Label::Treatment).collect();
    roc_auc(&scores, &positive).ok()
}

fn confusion_of(preds: &[&ParticipantPrediction]) -> Confusion {
    Confusion::from_pairs(preds.iter().map(|p| (p.label == Label::Treatment, p.predicted == Label::Treatment)))
}

/// Train one model per fold and score its held-out participants.
///
/// k-fold metrics are averaged across folds; leave-one-out metrics are
/// computed over the pooled held-out predictions, since a single-participant
/// fold has no meaningful precision, recall or AUC.
pub fn run_cv(
    dataset: &[ParticipantSeries],
    protocol: Protocol,
    hyper: &Hyperparams,
    config: &TrainConfig,
) -> Result<CvOutcome, TrainError> {
    config.validate()?;
    let plan = match protocol {
        Protocol::Kfold5 => split_kfold(dataset, 5, config.seed)?,
        Protocol::Loocv => split_loocv(dataset)?,
    };
    let by_id = |id: &str| dataset.iter().find(|p| p.participant_id == id);

    let folds: Vec<(MstftModel, TrainOutcome, Vec<ParticipantPrediction>)> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            let train_set: Vec<ParticipantSeries> = fold.train.iter().filter_map(|id| by_id(id)).cloned().collect();
            let fold_seed = config.seed.wrapping_add(k as u64);
            let mut model = MstftModel::new(hyper.clone(), fold_seed)?;
            let fold_config = TrainConfig {
                seed: fold_seed,
                ..config.clone()
            };
            let outcome = train(&mut model, &train_set, &fold_config)?;
            let mut preds = Vec::new();
            for id in &fold.test {
                let p = by_id(id).ok_or_else(|| TrainError::Config(format!("unknown participant `{id}`")))?;
                let windows = participant_windows(p, hyper.t, config.max_windows_per_participant)?;
                let refs: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
                let (probability, predicted) = aggregate_probability(&model.predict(&refs)?)?;
                preds.push(ParticipantPrediction {
                    participant_id: id.clone(),
                    fold: k,
                    label: p.label,
                    probability,
                    predicted,
                    n_windows: refs.len(),
                });
            }
            log::info!("fold {k}: trained {} epochs", outcome.loss_history.len());
            Ok((model, outcome, preds))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut per_fold = Vec::new();
    let mut models = Vec::new();
    let mut per_participant = Vec::new();
    for (k, (model, training, preds)) in folds.into_iter().enumerate() {
        let refs: Vec<&ParticipantPrediction> = preds.iter().collect();
        let confusion = confusion_of(&refs);
        per_fold.push(FoldReport {
            fold: k,
            test: plan.folds[k].test.clone(),
            metrics: confusion.metrics(),
            confusion,
            auc: auc_of(&refs),
            training,
        });
        models.push(model);
        per_participant.extend(preds);
    }

    let all: Vec<&ParticipantPrediction> = per_participant.iter().collect();
    let confusion = confusion_of(&all);
    let aggregate = match protocol {
        Protocol::Loocv => {
            let m = confusion.metrics();
            AggregateMetrics {
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                auc: auc_of(&all),
                flags: m.flags,
            }
        }
        Protocol::Kfold5 => {
            let n = per_fold.len() as f64;
            let avg = |f: fn(&ClassMetrics) -> f64| per_fold.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            let aucs: Vec<f64> = per_fold.iter().filter_map(|r| r.auc).collect();
            let mut flags: Vec<MetricFlag> = per_fold.iter().flat_map(|r| r.metrics.flags.iter().copied()).collect();
            flags.sort_by_key(|f| *f as u8);
            flags.dedup();
            AggregateMetrics {
                accuracy: avg(|m| m.accuracy),
                precision: avg(|m| m.precision),
                recall: avg(|m| m.recall),
                f1: avg(|m| m.f1),
                auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
                flags,
            }
        }
    };
    Ok(CvOutcome {
        report: EvalReport {
            protocol,
            seed: config.seed,
            per_fold,
            aggregate,
            confusion,
            per_participant,
        },
        models,
    })
}
