//! Fixtures shared by the benchmarks.

use heart2mind_core::windowing::{synth_dataset, ParticipantSeries};

/// A deterministic synthetic cohort.
pub fn cohort(n_per_class: usize) -> Vec<ParticipantSeries> {
    synth_dataset(n_per_class, 11)
}

/// `n` consecutive windows of length `t` cut from the first participant.
pub fn windows(n: usize, t: usize) -> Vec<Vec<f64>> {
    let series = &cohort(1)[0].rri;
    (0..n).map(|i| series[i * 7..i * 7 + t].to_vec()).collect()
}
