use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::mstft::Hyperparams;

fn record(layer: &'static str, h: usize, l: usize, f: impl Fn(usize, usize, usize) -> f64) -> AttentionRecord {
    let mut weights = Vec::new();
    for head in 0..h {
        for q in 0..l {
            for k in 0..l {
                weights.push(f(head, q, k));
            }
        }
    }
    AttentionRecord {
        layer,
        shape: vec![1, h, l, l],
        weights,
    }
}

#[test]
fn uniform_attention_is_degenerate() {
    let r = record("fusion", 2, 10, |_, _, _| 0.1);
    let m = attention_map(&[r.clone(), r], 0, 300, AttentionReduction::MeanOverQueries).unwrap();
    assert_eq!(m.values.len(), 300);
    assert!(m.values.iter().all(|&v| v == 0.5));
    assert_eq!(m.kind, MapKind::Attention);
}

#[test]
fn concentrated_attention_peaks_at_target() {
    let p = 7;
    let r = record("fusion", 1, 20, |_, _, k| if k == p { 1.0 } else { 0.0 });
    let m = attention_map(&[r], 0, 20, AttentionReduction::MeanOverQueries).unwrap();
    let argmax = m.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax, p);
    assert_eq!(m.values[p], 1.0);
}

#[test]
fn key_axis_switch() {
    // Row q puts all its mass on key 0, scaled by (q + 1) so rows differ.
    let r = record("x", 1, 4, |_, q, k| if k == 0 { (q + 1) as f64 } else { 0.0 });
    assert_eq!(attention_vector(&r, 0, AttentionReduction::MeanOverKeys).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
    assert_eq!(attention_vector(&r, 0, AttentionReduction::MeanOverQueries).unwrap(), vec![2.5, 0.0, 0.0, 0.0]);
    assert!(attention_vector(&r, 1, AttentionReduction::MeanOverKeys).is_err());
    assert!(attention_map(&[], 0, 4, AttentionReduction::MeanOverKeys).is_err());
}

#[test]
fn expand_examples() {
    assert_eq!(expand(&[0.0, 1.0], 5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let v = vec![3.0, 1.0, 4.0];
    assert_eq!(expand(&v, 3).unwrap(), v);
    assert!(matches!(expand(&[1.0; 4], 3), Err(SaeError::Contract(_))));
    assert_eq!(expand(&[2.0], 4).unwrap(), vec![2.0; 4]);
}

#[test]
fn normalize_examples() {
    assert_eq!(normalize_map(&[1.0, 2.0, 3.0]), vec![0.0, 0.5, 1.0]);
    assert_eq!(normalize_map(&[4.2; 6]), vec![0.5; 6]);
    assert_eq!(normalize_map(&[0.0; 3]), vec![0.5; 3]);
}

#[test]
fn grad_cam_examples() {
    // Zero gradient: every position ReLUs to zero, then degenerate normalization.
    let act = Tensor::from_fn(&[6, 3], |i| i as f64);
    let cam = grad_cam(&act, &Tensor::zeros(&[6, 3])).unwrap();
    assert!(cam.iter().all(|&v| v == 0.0));
    assert_eq!(normalize_map(&cam), vec![0.5; 6]);

    // One channel, positive gradient, one-hot activation.
    let p = 4;
    let act = Tensor::from_fn(&[10, 1], |i| if i == p { 1.0 } else { 0.0 });
    let grad = Tensor::full(&[10, 1], 0.3);
    let cam = normalize_map(&grad_cam(&act, &grad).unwrap());
    assert_eq!(cam[p], 1.0);
    assert_eq!(cam.iter().filter(|&&v| v == 1.0).count(), 1);

    assert!(grad_cam(&act, &Tensor::zeros(&[5, 2])).is_err());
}

#[test]
fn dtw_identity_and_shift() {
    let a: Vec<f64> = (0..40).map(|i| ((i as f64) / 4.0).sin()).collect();
    let r = dtw(&a, &a).unwrap();
    assert_eq!(r.cost, 0.0);
    assert_eq!(r.aligned, a);
    assert!(r.path.iter().all(|&(i, j)| i == j));

    let mut b = vec![a[0]; 2];
    b.extend_from_slice(&a[..a.len() - 2]);
    let l2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let cost = dtw_cost(&a, &b).unwrap();
    assert!(cost < l2, "{cost} vs {l2}");
    assert!(dtw(&[], &[1.0]).is_err());
    assert!(dtw_align(&[1.0, 2.0], &[1.0]).is_err());
}

/// Exhaustive search over all monotone paths for tiny inputs.
fn brute_dtw(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
    let c = (a[i] - b[j]).powi(2);
    if i == 0 && j == 0 {
        return c;
    }
    let mut best = f64::INFINITY;
    if i > 0 {
        best = best.min(brute_dtw(a, b, i - 1, j));
    }
    if j > 0 {
        best = best.min(brute_dtw(a, b, i, j - 1));
    }
    if i > 0 && j > 0 {
        best = best.min(brute_dtw(a, b, i - 1, j - 1));
    }
    c + best
}

proptest! {
    #[test]
    fn dtw_cost_matches_exhaustive(a in prop::collection::vec(-2.0f64..2.0, 1..6), b in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let r = dtw(&a, &b).unwrap();
        prop_assert!((r.cost - brute_dtw(&a, &b, a.len() - 1, b.len() - 1)).abs() < 1e-12);
        prop_assert!(r.cost >= 0.0);
        let path_cost: f64 = r.path.iter().map(|&(i, j)| (a[i] - b[j]).powi(2)).sum();
        prop_assert!((path_cost - r.cost).abs() < 1e-12);
        prop_assert_eq!(r.path[0], (0, 0));
        prop_assert_eq!(*r.path.last().unwrap(), (a.len() - 1, b.len() - 1));
    }

    #[test]
    fn dtw_self_alignment_exact(a in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let r = dtw(&a, &a).unwrap();
        prop_assert_eq!(r.cost, 0.0);
        prop_assert_eq!(r.aligned, a);
    }

    #[test]
    fn normalize_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..40), scale in 0.1f64..50.0, shift in -20.0f64..20.0) {
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let a = normalize_map(&v);
        let b = normalize_map(&v.iter().map(|x| scale * x + shift).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(a.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        prop_assert_eq!(a.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn expand_preserves_monotonicity(mut v in prop::collection::vec(-5.0f64..5.0, 2..30), extra in 0usize..200) {
        v.sort_by(f64::total_cmp);
        let t = v.len() + extra;
        let e = expand(&v, t).unwrap();
        prop_assert_eq!(e.len(), t);
        prop_assert_eq!(e[0], v[0]);
        prop_assert!((e[t - 1] - v[v.len() - 1]).abs() < 1e-12);
        prop_assert!(e.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn regions_are_well_formed(d in prop::collection::vec(0.0f64..1.0, 1..300), rho in 0.1f64..0.9, delta in 0usize..15) {
        let regions = regions_from_map(&d, rho, delta);
        for r in &regions {
            prop_assert!(r.start <= r.end && r.end < d.len());
            prop_assert!(d[r.start] > rho && d[r.end] > rho);
            prop_assert!(d[r.start..=r.end].iter().any(|&v| v > rho));
        }
        for w in regions.windows(2) {
            // Sorted, disjoint and separated by more than delta unmasked samples.
            prop_assert!(w[1].start > w[0].end + 1 + delta);
        }
        let masked = d.iter().filter(|&&v| v > rho).count();
        let covered: usize = regions.iter().map(|r| d[r.start..=r.end].iter().filter(|&&v| v > rho).count()).sum();
        prop_assert_eq!(masked, covered);
        let runs: Vec<(usize, usize)> = regions.iter().map(|r| (r.start, r.end)).collect();
        prop_assert_eq!(merge_runs(&runs, delta), runs);
    }
}

#[test]
fn discrepancy_examples() {
    let e = vec![0.3; 300];
    let (d, regions) = discrepancy(&e, &e, 0.5, 10).unwrap();
    assert!(d.iter().all(|&v| v == 0.0));
    assert!(regions.is_empty());

    let attn: Vec<f64> = (0..300).map(|i| if (100..=120).contains(&i) { 1.0 } else { 0.0 }).collect();
    let (_, regions) = discrepancy(&attn, &[0.0; 300], 0.5, 5).unwrap();
    assert_eq!(regions.len(), 1);
    assert_eq!((regions[0].start, regions[0].end, regions[0].peak), (100, 120, 1.0));

    let mut d = vec![0.0; 30];
    for i in (10..=12).chain(16..=18) {
        d[i] = 0.9;
    }
    let spans = |delta| regions_from_map(&d, 0.5, delta).iter().map(|r| (r.start, r.end)).collect::<Vec<_>>();
    assert_eq!(spans(5), vec![(10, 18)]);
    assert_eq!(spans(2), vec![(10, 12), (16, 18)]);
    // Exactly rho is not masked.
    assert!(regions_from_map(&[0.5; 8], 0.5, 0).is_empty());
    assert!(discrepancy(&[0.0; 3], &[0.0; 4], 0.5, 1).is_err());
}

#[test]
fn flag_rule() {
    let r = |n: usize| {
        (0..n)
            .map(|i| DiscrepancyRegion {
                start: 20 * i,
                end: 20 * i + 1,
                peak: 1.0,
                hrv: None,
            })
            .collect::<Vec<_>>()
    };
    assert!(!flag(&r(0), 5));
    assert!(!flag(&r(5), 5));
    assert!(flag(&r(6), 5));
    assert!(flag(&r(7), 5));
}

#[test]
fn explain_contract_on_model() {
    let model = MstftModel::new(Hyperparams::reduced(), 2).unwrap();
    let w: Vec<f64> = (0..32).map(|i| (i as f64 / 3.0).sin()).collect();
    let cfg = SaeConfig::default();
    let r = explain(&model, &w, &cfg).unwrap();
    for v in [&r.e_attn, &r.e_grad, &r.e_attn_aligned, &r.d_map] {
        assert_eq!(v.len(), 32);
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
    for t in 0..32 {
        assert!((r.d_map[t] - (r.e_attn_aligned[t] - r.e_grad[t]).abs()).abs() <= 1e-12);
    }
    assert_eq!(r.flagged, r.regions.len() > cfg.flag_threshold);
    assert_eq!(r.predicted, Label::from_probability(r.probability));
    assert!(explain(&model, &w[..10], &cfg).is_err());

    let (m, p) = gradient_explanation(&model, &w, GradTarget::Positive).unwrap();
    assert_eq!(m.source_layers, vec!["fusion", "self_attention"]);
    assert_abs_diff_eq!(p, r.probability, epsilon = 1e-15);
}

#[test]
fn predicted_target_flips_sign_for_control() {
    let model = MstftModel::new(Hyperparams::reduced(), 2).unwrap();
    let w: Vec<f64> = (0..32).map(|i| (i as f64 / 5.0).cos()).collect();
    let (pos, p) = gradient_explanation(&model, &w, GradTarget::Positive).unwrap();
    let (pred, _) = gradient_explanation(&model, &w, GradTarget::Predicted).unwrap();
    if p >= 0.5 {
        assert_eq!(pos.values, pred.values);
    } else {
        assert_ne!(pos.values, pred.values);
    }
}

#[test]
fn region_hrv_attachment() {
    let raw: Vec<f64> = (0..300).map(|i| 800.0 + 40.0 * ((i as f64) / 3.0).sin()).collect();
    let mut r = SaeResult {
        e_attn: vec![],
        e_attn_aligned: vec![],
        e_grad: vec![],
        d_map: vec![],
        regions: vec![DiscrepancyRegion {
            start: 10,
            end: 80,
            peak: 0.8,
            hrv: None,
        }],
        flagged: false,
        probability: 0.2,
        predicted: Label::Control,
    };
    attach_region_hrv(&mut r, &raw);
    let h = r.regions[0].hrv.as_ref().unwrap();
    assert_eq!(h.n_beats, 71);
    assert_eq!(h.segment, crate::hrv::Segment::Range { start: 10, end: 80 });
}

#[test]
fn window_aggregation() {
    let a = [1.0, 1.0, 1.0];
    let b = [0.0, 0.0, 0.0];
    let out = aggregate_windows(&[(0, &a), (2, &b)], 6);
    assert_eq!(out, vec![Some(1.0), Some(1.0), Some(0.5), Some(0.0), Some(0.0), None]);
}

#[test]
fn result_json_shape() {
    let r = SaeResult {
        e_attn: vec![0.0, 1.0],
        e_attn_aligned: vec![0.0, 1.0],
        e_grad: vec![1.0, 0.0],
        d_map: vec![1.0, 1.0],
        regions: vec![DiscrepancyRegion {
            start: 0,
            end: 1,
            peak: 1.0,
            hrv: None,
        }],
        flagged: false,
        probability: 0.7,
        predicted: Label::Treatment,
    };
    let v = serde_json::to_value(&r).unwrap();
    assert_eq!(v["regions"][0], serde_json::json!({"start": 0, "end": 1, "peak": 1.0}));
    assert_eq!(v["flagged"], false);
    let back: SaeResult = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}
