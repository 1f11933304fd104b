use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Label, ParticipantSeries};

/// Beats generated per synthetic participant.
pub const SYNTH_BEATS: usize = 4500;

struct Generator {
    base: f64,
    lf_amp: f64,
    hf_amp: f64,
    noise_sd: f64,
}

const CONTROL: Generator = Generator {
    base: 850.0,
    lf_amp: 60.0,
    hf_amp: 40.0,
    noise_sd: 15.0,
};

const TREATMENT: Generator = Generator {
    base: 780.0,
    lf_amp: 15.0,
    hf_amp: 5.0,
    noise_sd: 8.0,
};

fn generate(g: &Generator, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, g.noise_sd).expect("positive sd");
    let mut t_s = 0.0;
    (0..SYNTH_BEATS)
        .map(|_| {
            let rri = g.base
                + g.lf_amp * (2.0 * PI * 0.1 * t_s).sin()
                + g.hf_amp * (2.0 * PI * 0.25 * t_s).sin()
                + noise.sample(rng);
            t_s += rri / 1000.0;
            rri
        })
        .collect()
}

/// Balanced synthetic cohort: `control_XX` then `treatment_XX` participants.
///
/// Each participant draws from its own ChaCha stream, so a participant's
/// series does not depend on the cohort size.
pub fn synth_dataset(n_per_class: usize, seed: u64) -> Vec<ParticipantSeries> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for (class, label, g) in [(0u64, Label::Control, &CONTROL), (1, Label::Treatment, &TREATMENT)] {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(class << 32 | i as u64);
            out.push(ParticipantSeries {
                participant_id: format!("{}_{:02}", label.as_str(), i + 1),
                rri: generate(g, &mut rng),
                label,
            });
        }
    }
    out
}
