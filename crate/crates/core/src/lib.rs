pub mod contest;
pub mod hrv;
pub mod mstft;
pub mod nn;
pub mod sae;
pub mod signal_store;
pub mod trainer;
pub mod windowing;

pub use contest::{ContestCase, Decision};
pub use hrv::HrvFeatures;
pub use mstft::{Hyperparams, MstftModel};
pub use sae::SaeResult;
pub use signal_store::SignalStore;
pub use trainer::{EvalReport, TrainConfig};
pub use windowing::{Label, ParticipantSeries, Protocol};
