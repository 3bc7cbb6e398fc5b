//! Exact gradients and biases, and the naive / TIS / MIS / DVP estimators.

mod exact;
mod stochastic;

use thiserror::Error;

use crate::generation::GenerationError;

pub use exact::{
    bias_direct, bias_formula, bias_formula_signed, exact_gradient, exact_gradient_in_support, exact_objective,
    objective_bias_bound,
};
pub use stochastic::{
    add_contribution, batch_advantages, estimate, mean_and_standard_error, rloo_advantages, Advantage, Contribution,
    Diagnostics, EstimatorConfig, EstimatorKind, GradientEstimate, ScoreCache, DEFAULT_GROUP_SIZE, DEFAULT_MIS_CLIP,
    DEFAULT_TIS_CLIP,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid estimator config: {0}")]
    BadConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("estimator rho {estimator} differs from trajectory rho {trajectory}")]
    RhoMismatch { estimator: f64, trajectory: f64 },
    #[error(transparent)]
    Generation(#[from] GenerationError),
}
