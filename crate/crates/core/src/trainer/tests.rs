use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::mstft::Hyperparams;
use crate::nn::grad_check;
use crate::windowing::{synth_dataset, Protocol};

fn tiny() -> Hyperparams {
    Hyperparams {
        lr: 5e-3,
        ..Hyperparams::reduced()
    }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 5e-3,
        seed: 3,
        max_windows_per_participant: Some(6),
        validation_fraction: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn bce_examples() {
    assert_abs_diff_eq!(bce_loss(0.5, 1.0), std::f64::consts::LN_2, epsilon = 1e-12);
    assert!(bce_loss(1.0 - BCE_EPS, 1.0) < 1e-6);
    // Clamped, so certainty in the wrong direction stays finite.
    assert!(bce_loss(0.0, 1.0).is_finite());
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let p = Tensor::new(&[4, 1], vec![0.1, 0.35, 0.6, 0.93]).unwrap();
    let err = grad_check(|g, v| g.bce(v[0], &[1.0, 0.0, 1.0, 0.0], BCE_EPS), &[p], 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn confusion_examples() {
    let m = confusion_metrics(27, 27, 3, 3);
    for v in [m.accuracy, m.precision, m.recall, m.f1] {
        assert_eq!(v, 0.9);
    }
    let m = confusion_metrics(30, 30, 0, 0);
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    assert!(m.flags.is_empty());
    let m = confusion_metrics(0, 30, 0, 30);
    assert_eq!(m.recall, 0.0);
    assert!(m.flags.contains(&MetricFlag::PrecisionUndefined));
    assert!(!m.flags.is_empty());
    let m = confusion_metrics(0, 0, 0, 0);
    assert!(m.flags.contains(&MetricFlag::NoSamples));
}

#[test]
fn auc_examples() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let y = [false, false, true, true];
    assert_eq!(roc_auc(&s, &y).unwrap(), 0.75);
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.5; 4], &y).unwrap(), 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(TrainError::UndefinedAuc)));
}

/// Direct enumeration of every (positive, negative) pair.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn auc_matches_pairwise_oracle(raw in prop::collection::vec((0u8..20, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 20.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        // Strictly monotone transform leaves the ranking, and the AUC, unchanged.
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&warped, &labels).unwrap(), auc);
    }

    #[test]
    fn metric_identities(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let m = confusion_metrics(tp, tn, fp, fn_);
        let total = tp + tn + fp + fn_;
        if total > 0 {
            prop_assert!((m.accuracy - (tp + tn) as f64 / total as f64).abs() < 1e-15);
        }
        prop_assert!((m.f1 * (m.precision + m.recall) - 2.0 * m.precision * m.recall).abs() < 1e-12);
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn participant_aggregation() {
    let (p, l) = aggregate_probability(&[0.9, 0.8, 0.7]).unwrap();
    assert_abs_diff_eq!(p, 0.8, epsilon = 1e-12);
    assert_eq!(l, Label::Treatment);
    assert_eq!(aggregate_probability(&[0.2; 5]).unwrap().1, Label::Control);
    assert_eq!(aggregate_probability(&[0.5]).unwrap().1, Label::Treatment);
    let model = MstftModel::new(tiny(), 0).unwrap();
    assert!(matches!(predict_participant(&model, &[]), Err(TrainError::NoWindows)));
    let w = vec![0.1; 32];
    let (p, _) = predict_participant(&model, &[&w]).unwrap();
    assert!(p > 0.0 && p < 1.0);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
    let mut opt = AdamW::new(0.1, 0.0);
    let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
    opt.step(&mut params, &[("w".into(), g)]).unwrap();
    // Bias-corrected first step is lr * sign(g) up to the epsilon term.
    let w = params.get("w").unwrap().data();
    assert_abs_diff_eq!(w[0], 0.9, epsilon = 1e-8);
    assert_abs_diff_eq!(w[1], -0.9, epsilon = 1e-8);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adamw_decay_is_decoupled() {
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
    let mut opt = AdamW::new(0.1, 0.5);
    opt.step(&mut params, &[("w".into(), Tensor::zeros(&[1]))]).unwrap();
    // Zero gradient: only the decay term acts, scaled by lr.
    assert_abs_diff_eq!(params.get("w").unwrap().item(), 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = synth_dataset(2, 4);
    let mut model = MstftModel::new(tiny(), 1).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..quick(2)
    };
    train(&mut model, &data, &cfg).unwrap();
    for ((n, a), (_, b)) in before.iter().zip(model.params.iter()) {
        assert_eq!(a, b, "{n} changed");
    }
}

#[test]
fn single_class_rejected() {
    let data: Vec<_> = synth_dataset(2, 4).into_iter().filter(|p| p.label == Label::Control).collect();
    let mut model = MstftModel::new(tiny(), 1).unwrap();
    assert!(matches!(train(&mut model, &data, &quick(1)), Err(TrainError::Config(_))));
    assert!(matches!(train(&mut model, &[], &quick(1)), Err(TrainError::Config(_))));
}

#[test]
fn invalid_config_rejected() {
    for cfg in [
        TrainConfig { epochs: 0, ..quick(1) },
        TrainConfig { batch_size: 0, ..quick(1) },
        TrainConfig { lr: -1.0, ..quick(1) },
        TrainConfig { validation_fraction: 1.5, ..quick(1) },
        TrainConfig {
            max_windows_per_participant: Some(0),
            ..quick(1)
        },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = synth_dataset(2, 4);
    let run = || {
        let mut model = MstftModel::new(tiny(), 1).unwrap();
        let out = train(&mut model, &data, &quick(30)).unwrap();
        (out, model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.loss_history, b.loss_history);
    for ((_, x), (_, y)) in ma.params.iter().zip(mb.params.iter()) {
        assert_eq!(x, y);
    }
    assert_eq!(a.loss_history.len(), 30);
    assert!(a.loss_history.last().unwrap() < a.loss_history.first().unwrap(), "{:?}", a.loss_history);
}

#[test]
fn validation_split_and_early_stop() {
    let data = synth_dataset(2, 4);
    let mut model = MstftModel::new(tiny(), 1).unwrap();
    let cfg = TrainConfig {
        validation_fraction: 0.2,
        early_stop_patience: 1,
        ..quick(40)
    };
    let out = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(out.n_train_windows + out.n_val_windows, 4 * 6);
    assert_eq!(out.n_val_windows, 5);
    assert_eq!(out.val_history.len(), out.loss_history.len());
    let best = out.best_epoch.unwrap();
    let min = out.val_history.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(out.val_history[best], min);
    if out.stopped_early {
        assert!(out.loss_history.len() < 40);
    }
}

#[test]
fn window_cap_spreads_starts() {
    let data = synth_dataset(1, 2);
    let w = participant_windows(&data[0], 300, Some(4)).unwrap();
    assert_eq!(w.len(), 4);
    assert_eq!(w[0].start_index, 0);
    assert_eq!(w[3].start_index + 300, data[0].rri.len());
    let z = crate::windowing::znorm(&data[0].rri).unwrap();
    assert_eq!(w[1].values, z[w[1].start_index..w[1].start_index + 300]);
}

#[test]
fn loocv_shape() {
    let data = synth_dataset(2, 4);
    let out = run_cv(&data, Protocol::Loocv, &tiny(), &quick(2)).unwrap();
    assert_eq!(out.models.len(), 4);
    assert_eq!(out.report.per_fold.len(), 4);
    assert_eq!(out.report.per_participant.len(), 4);
    assert_eq!(out.report.confusion.total(), 4);
    assert!(out.report.per_fold.iter().all(|f| f.test.len() == 1 && f.auc.is_none()));
    let json: serde_json::Value = serde_json::from_str(&out.report.to_json()).unwrap();
    for key in ["protocol", "seed", "per_fold", "aggregate", "confusion", "per_participant"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["protocol"], "loocv");
    assert!(json["confusion"].get("fn").is_some());
}

#[test]
fn kfold_averages_folds() {
    let data = synth_dataset(5, 4);
    let out = run_cv(&data, Protocol::Kfold5, &tiny(), &quick(1)).unwrap();
    let r = &out.report;
    assert_eq!(r.per_fold.len(), 5);
    assert_eq!(r.confusion.total(), 10);
    let mean_acc = r.per_fold.iter().map(|f| f.metrics.accuracy).sum::<f64>() / 5.0;
    assert_abs_diff_eq!(r.aggregate.accuracy, mean_acc, epsilon = 1e-12);
    let tested: usize = r.per_fold.iter().map(|f| f.test.len()).sum();
    assert_eq!(tested, 10);
}
