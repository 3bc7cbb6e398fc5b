//! Min-p safe sets, masked logits and constrained (renormalized) policies.
//!
//! Membership is decided in logit space: token `a` is retained when
//! `z_a >= max_k z_k + ln(rho)`, which is the same as
//! `p_a >= rho * max_k p_k` without forming tiny probabilities. Ties at the
//! threshold are retained.

use thiserror::Error;

use crate::generation::Trajectory;
use crate::scalar::Real;
use crate::simplex::{self, log_sum_exp, LogitVector, ProbVector, SimplexError};

/// `e^-13`, the default pruning threshold.
pub const DEFAULT_RHO: f64 = 2.260_329_406_981_054_3e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruningError {
    #[error("rho must lie in (0, 1], got {0}")]
    BadRho(f64),
    #[error("token {0} is not in the safe set")]
    NotInSafeSet(usize),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

pub type Result<T> = std::result::Result<T, PruningError>;

/// Retained token subset of one next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSet<S> {
    members: Vec<bool>,
    retained_mass: S,
    log_retained_mass: S,
    rho: S,
}

impl<S: Real> SafeSet<S> {
    pub fn contains(&self, a: usize) -> bool {
        self.members.get(a).copied().unwrap_or(false)
    }

    pub fn mask(&self) -> &[bool] {
        &self.members
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.members.iter().all(|&m| m)
    }

    /// `Z = sum_{k in set} softmax(z)_k`.
    pub fn retained_mass(&self) -> S {
        self.retained_mass
    }

    /// `ln Z`, computed as a difference of log-sum-exps.
    pub fn log_retained_mass(&self) -> S {
        self.log_retained_mass
    }

    pub fn rho(&self) -> S {
        self.rho
    }
}

fn check_rho<S: Real>(rho: S) -> Result<()> {
    if !(rho > S::zero() && rho <= S::one()) {
        return Err(PruningError::BadRho(rho.as_f64()));
    }
    Ok(())
}

/// Logit-space membership threshold `max z + ln rho`.
pub fn logit_threshold<S: Real>(z: &LogitVector<S>, rho: S) -> S {
    z.max() + rho.ln()
}

pub fn minp_safe_set<S: Real>(z: &LogitVector<S>, rho: S) -> Result<SafeSet<S>> {
    check_rho(rho)?;
    let thr = logit_threshold(z, rho);
    let members: Vec<bool> = z.as_slice().iter().map(|&v| v >= thr).collect();
    let p = simplex::softmax(z)?;
    let retained_mass: S = p.as_slice().iter().zip(&members).filter(|(_, &m)| m).map(|(&pk, _)| pk).sum();
    let kept: Vec<S> = z.as_slice().iter().zip(&members).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let log_retained_mass = log_sum_exp(&kept) - log_sum_exp(z.as_slice());
    Ok(SafeSet { members, retained_mass, log_retained_mass, rho })
}

/// Members keep their logit; everything else is set to `mask_value`.
pub fn mask_logits<S: Real>(z: &LogitVector<S>, set: &SafeSet<S>, mask_value: S) -> LogitVector<S> {
    let values = z
        .as_slice()
        .iter()
        .zip(set.mask())
        .map(|(&v, &m)| if m { v } else { mask_value })
        .collect();
    LogitVector::new(values).expect("masking preserves finiteness")
}

/// Softmax restricted to an explicit membership mask (held fixed).
pub fn restricted_softmax<S: Real>(z: &LogitVector<S>, mask: &[bool]) -> ProbVector<S> {
    let kept: Vec<S> = z.as_slice().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let lse = log_sum_exp(&kept);
    let values = z
        .as_slice()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - lse).exp() } else { S::zero() })
        .collect();
    ProbVector::from_normalized(values)
}

/// `log` of [`restricted_softmax`]; `-inf` off the mask.
pub fn restricted_log_softmax<S: Real>(z: &LogitVector<S>, mask: &[bool]) -> Vec<S> {
    let kept: Vec<S> = z.as_slice().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let lse = log_sum_exp(&kept);
    z.as_slice()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v - lse } else { S::neg_infinity() })
        .collect()
}

/// Exact constrained policy `softmax(z)_a / Z` on the safe set, 0 elsewhere.
pub fn constrained_policy<S: Real>(z: &LogitVector<S>, rho: S) -> Result<ProbVector<S>> {
    let set = minp_safe_set(z, rho)?;
    Ok(restricted_softmax(z, set.mask()))
}

/// Gradient of `log pi_mp(a)` with respect to the logits, membership fixed:
/// `e_a - pi_mp`.
pub fn contrastive_gradient<S: Real>(z: &LogitVector<S>, a: usize, rho: S) -> Result<Vec<S>> {
    if a >= z.len() {
        return Err(SimplexError::IndexOutOfRange { index: a, size: z.len() }.into());
    }
    let set = minp_safe_set(z, rho)?;
    if !set.contains(a) {
        return Err(PruningError::NotInSafeSet(a));
    }
    let pi = restricted_softmax(z, set.mask());
    Ok(pi
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &pk)| if k == a { S::one() - pk } else { -pk })
        .collect())
}

/// Where a trajectory sits relative to both safe sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportClass {
    /// Every token is in both the training and the inference safe set.
    InSupport,
    /// Some token is outside the training safe set; its estimator weight is 0.
    ZeroWeight,
    /// Every token is training-safe but some token is outside the inference
    /// safe set. Impossible under min-p sampling, so it is flagged for audit.
    BiasLeak,
}

/// Classify from the per-step flags stored in the trajectory (computed at
/// `traj.rho`).
pub fn support_classify(traj: &Trajectory) -> SupportClass {
    if traj.steps.iter().any(|s| !s.safe_train) {
        SupportClass::ZeroWeight
    } else if traj.steps.iter().any(|s| !s.safe_infer) {
        SupportClass::BiasLeak
    } else {
        SupportClass::InSupport
    }
}
