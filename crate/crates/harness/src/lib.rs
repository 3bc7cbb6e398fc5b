//! Config-driven runner for the verification suites and the synthetic
//! training experiments built on `dvp-core`.

pub mod config;
pub mod metrics;
pub mod report;
pub mod stats;
pub mod sweep;
pub mod train;
pub mod verify;

use thiserror::Error;

use dvp_core::estimators::EstimatorError;
use dvp_core::generation::GenerationError;
use dvp_core::perturbation::PerturbationError;
use dvp_core::pruning::PruningError;
use dvp_core::simplex::SimplexError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC_ABORT: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric abort at iteration {iteration}: {reason}")]
    NumericAbort { iteration: usize, reason: String },
    #[error("verification failed: {0}")]
    VerifyFailed(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NumericAbort { .. } => EXIT_NUMERIC_ABORT,
            HarnessError::VerifyFailed(_) => EXIT_VERIFY_FAILED,
            HarnessError::Config(_) | HarnessError::Io { .. } | HarnessError::Json(_) | HarnessError::Csv(_) => {
                EXIT_CONFIG
            }
            HarnessError::Estimator(_)
            | HarnessError::Generation(_)
            | HarnessError::Simplex(_)
            | HarnessError::Perturbation(_)
            | HarnessError::Pruning(_) => EXIT_CONFIG,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Thread pool with exactly `workers` threads (at least one).
pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {workers} workers: {e}")))
}
