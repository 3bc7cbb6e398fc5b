//! Training/inference mismatch in policy-gradient RL, at toy scale.
//!
//! Softmax primitives ([`simplex`]), an additive logit-noise model of the
//! inference engine ([`perturbation`]), min-p safe sets and constrained
//! policies ([`pruning`]), a tabular generation MDP with exact oracles
//! ([`generation`]) and the gradient estimators compared on it
//! ([`estimators`]).
//!
//! The simplex, perturbation and pruning layers are generic over [`Real`]
//! (`f32` or `f64`); the aliases below fix them to `f64`, which is what the
//! generation and estimator layers use.

pub mod estimators;
pub mod generation;
pub mod perturbation;
pub mod pruning;
pub mod rng;
pub mod scalar;
pub mod simplex;

pub use rng::RngStream;
pub use scalar::Real;

pub type LogitVector = simplex::LogitVector<f64>;
pub type ProbVector = simplex::ProbVector<f64>;
pub type LogProbVector = simplex::LogProbVector<f64>;
pub type SafeSet = pruning::SafeSet<f64>;
pub type MismatchRecord = perturbation::MismatchRecord<f64>;
