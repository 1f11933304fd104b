use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::hrv::time_domain;

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
}

fn cohort(labels: &[Label]) -> Vec<ParticipantSeries> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| ParticipantSeries {
            participant_id: format!("p{i:02}"),
            rri: vec![800.0; 4],
            label,
        })
        .collect()
}

#[test]
fn znorm_examples() {
    assert_eq!(znorm(&[800.0, 800.0, 800.0]), Err(WindowError::Degenerate));
    assert_eq!(znorm(&[799.0, 801.0, 799.0, 801.0]).unwrap(), vec![-1.0, 1.0, -1.0, 1.0]);
    assert_eq!(znorm(&[1.0]), Err(WindowError::TooShort(1)));
}

#[test]
fn znorm_random_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..1000).map(|_| rng.random_range(500.0..1200.0)).collect();
    let (m, s) = moments(&znorm(&x).unwrap());
    assert!(m.abs() < 1e-9);
    assert!((s - 1.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn znorm_is_idempotent(x in prop::collection::vec(300.0f64..2000.0, 3..200)) {
        prop_assume!(moments(&x).1 > 1e-3);
        let once = znorm(&x).unwrap();
        let twice = znorm(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn windows_reconstruct_series(x in prop::collection::vec(-3.0f64..3.0, 5..80), t in 1usize..5) {
        let w = make_windows(&x, t, "p").unwrap();
        prop_assert_eq!(w.len(), x.len() - t + 1);
        prop_assert_eq!(reconstruct(&w), x);
    }

    #[test]
    fn kfold_partitions_participants(n_c in 3usize..20, n_t in 3usize..20, seed in 0u64..1000) {
        let mut labels = vec![Label::Control; n_c];
        labels.extend(vec![Label::Treatment; n_t]);
        let people = cohort(&labels);
        let plan = split_kfold(&people, 5, seed).unwrap();
        let mut seen: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        seen.sort();
        let mut all: Vec<String> = people.iter().map(|p| p.participant_id.clone()).collect();
        all.sort();
        prop_assert_eq!(seen, all);
        let ratio = n_t as f64 / (n_c + n_t) as f64;
        for f in &plan.folds {
            prop_assert!(f.train.iter().all(|id| !f.test.contains(id)));
            prop_assert_eq!(f.train.len() + f.test.len(), n_c + n_t);
            let pos = f.test.iter().filter(|id| people.iter().any(|p| &p.participant_id == *id && p.label == Label::Treatment)).count();
            prop_assert!((pos as f64 - ratio * f.test.len() as f64).abs() <= 1.0 + 1e-9);
        }
    }
}

#[test]
fn window_count_and_slicing() {
    let x: Vec<f64> = (0..310).map(|i| i as f64).collect();
    let w = make_windows(&x, 300, "p").unwrap();
    assert_eq!(w.len(), 11);
    assert_eq!(w[3].values, x[3..303]);
    assert_eq!(w[3].start_index, 3);
    let one = make_windows(&x[..300], 300, "p").unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].values, x[..300]);
    assert!(matches!(make_windows(&x[..299], 300, "p"), Err(WindowError::InsufficientData { .. })));
    assert_eq!(make_windows_strided(&x, 300, 5, "p").unwrap().len(), 3);
}

#[test]
fn window_starts_spread_evenly_under_cap() {
    assert_eq!(window_starts(310, 300, None).unwrap().len(), 11);
    assert_eq!(window_starts(310, 300, Some(3)).unwrap(), vec![0, 5, 10]);
    assert_eq!(window_starts(310, 300, Some(50)).unwrap().len(), 11);
}

#[test]
fn kfold_sixty_balanced() {
    let mut labels = vec![Label::Control; 30];
    labels.extend(vec![Label::Treatment; 30]);
    let people = cohort(&labels);
    let plan = split_kfold(&people, 5, 42).unwrap();
    assert_eq!(plan.folds.len(), 5);
    for f in &plan.folds {
        assert_eq!(f.test.len(), 12);
        assert_eq!(f.train.len(), 48);
        let pos = f.test.iter().filter(|id| people.iter().any(|p| &p.participant_id == *id && p.label == Label::Treatment)).count();
        assert_eq!(pos, 6);
    }
    assert_eq!(split_kfold(&people, 5, 42).unwrap(), plan);
    assert!(matches!(split_kfold(&people[..4], 5, 0), Err(WindowError::TooFewParticipants { .. })));
}

#[test]
fn loocv_shapes() {
    let people = cohort(&[Label::Control; 60]);
    let plan = split_loocv(&people).unwrap();
    assert_eq!(plan.folds.len(), 60);
    assert!(plan.folds.iter().all(|f| f.train.len() == 59 && f.test.len() == 1));
    assert_eq!(split_loocv(&people[..2]).unwrap().folds.len(), 2);
    assert!(split_loocv(&people[..1]).is_err());
}

#[test]
fn synth_is_deterministic_and_labelled() {
    let a = synth_dataset(6, 1);
    let b = synth_dataset(6, 1);
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_eq!(a.len(), 12);
    assert!(a.iter().all(|p| p.rri.len() >= 4500));
    assert_eq!(a.iter().filter(|p| p.label == Label::Treatment).count(), 6);
    // A participant's series does not depend on cohort size.
    assert_eq!(synth_dataset(2, 1)[0], a[0]);
    assert_ne!(synth_dataset(6, 2)[0], a[0]);
}

#[test]
fn synth_treatment_has_blunted_variability() {
    for seed in 1..=10 {
        let data = synth_dataset(3, seed);
        let (control, treatment) = data.split_at(3);
        for (c, t) in control.iter().zip(treatment) {
            assert!(moments(&t.rri).1 < moments(&c.rri).1);
            let rc = time_domain(&c.rri).unwrap().rmssd.unwrap();
            let rt = time_domain(&t.rri).unwrap().rmssd.unwrap();
            assert!(rc > rt, "seed {seed}: rmssd {rc} vs {rt}");
        }
    }
}

#[test]
fn loader_reads_labels_and_isolates_errors() {
    let dir = tempfile::tempdir().unwrap();
    let series: Vec<String> = (0..320).map(|i| format!("{}", 800 + i % 7)).collect();
    std::fs::write(dir.path().join("control_01.txt"), series.join("\n")).unwrap();
    let mut csv = String::from("timestamp_ms,rri_ms,hr_bpm,ecg_uv\n");
    for i in 0..320 {
        csv.push_str(&format!("{},{},,\n", i * 800, 790 + i % 5));
    }
    csv.push_str("256000,6000,,\n");
    std::fs::write(dir.path().join("treatment_40.csv"), csv).unwrap();
    std::fs::write(dir.path().join("control_02.txt"), "800\n810\nabc\n").unwrap();
    std::fs::write(dir.path().join("treatment_03.txt"), "800\n810\n").unwrap();
    std::fs::write(dir.path().join("other.txt"), "800\n").unwrap();

    let (data, report) = load_hrv_acc(dir.path(), 300).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data[0].participant_id, "control_01");
    assert_eq!(data[1].label, Label::Treatment);
    assert_eq!(data[1].rri.len(), 320);
    assert_eq!(report.dropped_implausible, 1);
    assert_eq!(report.excluded.len(), 3);
    let bad = report.excluded.iter().find(|e| e.file == "control_02.txt").unwrap();
    assert!(bad.reason.contains("line 3"), "{}", bad.reason);

    std::fs::write(dir.path().join("manifest.csv"), "file,label\nother.txt,treatment\ncontrol_01.txt,treatment\n").unwrap();
    let (data, _) = load_hrv_acc(dir.path(), 1).unwrap();
    assert_eq!(data.iter().find(|p| p.participant_id == "control_01").unwrap().label, Label::Treatment);
    assert!(data.iter().any(|p| p.participant_id == "other"));
}

#[test]
fn loader_empty_and_missing_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (data, report) = load_hrv_acc(dir.path(), 300).unwrap();
    assert!(data.is_empty());
    assert_eq!(report.warnings.len(), 1);
    assert!(matches!(load_hrv_acc(&dir.path().join("nope"), 300), Err(WindowError::NotFound(_))));
}
