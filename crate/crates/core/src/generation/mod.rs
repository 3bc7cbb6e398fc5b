//! Toy autoregressive generation: tabular softmax policies, rollouts under a
//! perturbed inference twin, and exact oracles (enumeration and a forward
//! recursion).

pub mod dp;
mod enumerate;
mod policy;
mod task;
mod trajectory;

use thiserror::Error;

use crate::perturbation::PerturbationError;
use crate::pruning::PruningError;
use crate::simplex::SimplexError;

pub use enumerate::{check_cap, enumerate_trajectories, Enumerated, ENUMERATION_CAP};
pub use policy::{PolicyInit, TabularPolicy, MAX_TABLE_ENTRIES};
pub use task::{RewardKind, TaskSpec};
pub use trajectory::{
    rollout, rollout_batch, rollout_group, rollout_indexed, sequence_logprob, PolicyPair, Realization, Sampler, StepRecord, Trajectory,
    View,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("invalid policy shape: {0}")]
    InvalidShape(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("no context row for prompt {prompt} after {history:?}")]
    UnmappedState { prompt: usize, history: Vec<usize> },
    #[error("{size} sequences exceeds the enumeration cap of {cap}")]
    EnumerationCap { size: usize, cap: usize },
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
}
