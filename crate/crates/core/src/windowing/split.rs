use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, ParticipantSeries, WindowError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Kfold5,
    Loocv,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kfold5" => Ok(Protocol::Kfold5),
            "loocv" => Ok(Protocol::Loocv),
            other => Err(format!("unknown protocol `{other}` (expected kfold5 or loocv)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

fn folds_from_tests(participants: &[ParticipantSeries], tests: Vec<Vec<String>>) -> Vec<Fold> {
    tests
        .into_iter()
        .map(|test| Fold {
            train: participants
                .iter()
                .map(|p| p.participant_id.clone())
                .filter(|id| !test.contains(id))
                .collect(),
            test,
        })
        .collect()
}

/// Label-stratified k-fold split at participant level.
///
/// Each class is shuffled and dealt round-robin, with the dealing position
/// carried over between classes so fold sizes differ by at most one.
pub fn split_kfold(participants: &[ParticipantSeries], k: usize, seed: u64) -> Result<SplitPlan, WindowError> {
    if k < 2 || participants.len() < k {
        return Err(WindowError::TooFewParticipants {
            need: k.max(2),
            got: participants.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut slot = 0;
    for label in [Label::Control, Label::Treatment] {
        let mut ids: Vec<String> = participants
            .iter()
            .filter(|p| p.label == label)
            .map(|p| p.participant_id.clone())
            .collect();
        ids.shuffle(&mut rng);
        for id in ids {
            tests[slot % k].push(id);
            slot += 1;
        }
    }
    Ok(SplitPlan {
        protocol: Protocol::Kfold5,
        folds: folds_from_tests(participants, tests),
        seed,
    })
}

/// One fold per participant, holding that participant out.
pub fn split_loocv(participants: &[ParticipantSeries]) -> Result<SplitPlan, WindowError> {
    if participants.len() < 2 {
        return Err(WindowError::TooFewParticipants {
            need: 2,
            got: participants.len(),
        });
    }
    let tests = participants.iter().map(|p| vec![p.participant_id.clone()]).collect();
    Ok(SplitPlan {
        protocol: Protocol::Loocv,
        folds: folds_from_tests(participants, tests),
        seed: 0,
    })
}
