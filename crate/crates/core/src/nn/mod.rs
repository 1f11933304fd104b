//! Differentiable tensor operations used by the classifier.

mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, CoordResult, GradCheck, GradCheckReport};
pub use graph::{sigmoid, Activation, BatchStats, Gradients, Graph, Pool, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
use graph::adaptive_bins;

#[cfg(test)]
mod tests;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}
