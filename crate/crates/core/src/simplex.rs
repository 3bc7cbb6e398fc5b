//! Numerically stable probability-simplex primitives.
//!
//! Everything here is generic over [`Real`]. Softmax and log-softmax shift by
//! the maximum logit before exponentiating, and log-softmax is computed as
//! `z_a - logsumexp(z)`, never as `ln(softmax(z))`.

use std::ops::Index;

use thiserror::Error;

use crate::rng::RngStream;
use crate::scalar::Real;

/// Finite surrogate for `-inf` used when masking logits.
pub const DEFAULT_MASK_VALUE: f64 = -50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("empty support: every entry is the mask sentinel")]
    EmptySupport,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("not a probability vector (min entry {min}, sum {sum})")]
    NotNormalized { min: f64, sum: f64 },
    #[error("index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("finite-difference step must be positive and finite")]
    BadStep,
    #[error("function value is not finite at coordinate {0}")]
    NonFiniteValue(usize),
}

pub type Result<T> = std::result::Result<T, SimplexError>;

/// Raw next-token scores over a vocabulary of size `V >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector<S> {
    values: Vec<S>,
}

impl<S: Real> LogitVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.len() < 2 {
            return Err(SimplexError::VocabTooSmall(values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SimplexError::NonFiniteLogit(i));
        }
        Ok(Self { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    pub fn max(&self) -> S {
        self.values.iter().copied().fold(S::neg_infinity(), S::max)
    }

    /// Index of the first maximal entry.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    /// `z + eps`, entrywise.
    pub fn add(&self, eps: &[S]) -> Result<Self> {
        if eps.len() != self.len() {
            return Err(SimplexError::DimensionMismatch(self.len(), eps.len()));
        }
        Self::new(self.values.iter().zip(eps).map(|(&z, &e)| z + e).collect())
    }

    /// `z + c * 1`.
    pub fn shifted(&self, c: S) -> Self {
        Self { values: self.values.iter().map(|&z| z + c).collect() }
    }
}

impl<S> Index<usize> for LogitVector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.values[i]
    }
}

/// A distribution over the vocabulary: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<S> {
    values: Vec<S>,
}

impl<S: Real> ProbVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        let sum: S = values.iter().copied().sum();
        let min = values.iter().copied().fold(S::infinity(), S::min);
        if values.is_empty() || !(min >= S::zero()) || (sum - S::one()).abs() > S::SIMPLEX_TOL {
            return Err(SimplexError::NotNormalized { min: min.as_f64(), sum: sum.as_f64() });
        }
        Ok(Self { values })
    }

    pub(crate) fn from_normalized(values: Vec<S>) -> Self {
        debug_assert!(Self::new(values.clone()).is_ok());
        Self { values }
    }

    pub fn uniform(v: usize) -> Self {
        let p = S::one() / S::from_usize(v).unwrap();
        Self { values: vec![p; v] }
    }

    pub fn one_hot(v: usize, k: usize) -> Self {
        let mut values = vec![S::zero(); v];
        values[k] = S::one();
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<S> {
        self.values
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

impl<S> Index<usize> for ProbVector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.values[i]
    }
}

/// Normalized log-probabilities; `exp` of the entries sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector<S> {
    values: Vec<S>,
}

impl<S: Real> LogProbVector<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }

    pub fn exp(&self) -> ProbVector<S> {
        ProbVector::from_normalized(self.values.iter().map(|v| v.exp()).collect())
    }
}

impl<S> Index<usize> for LogProbVector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.values[i]
    }
}

fn argmax<S: Real>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_support<S: Real>(z: &LogitVector<S>) -> Result<()> {
    let sentinel = S::lit(DEFAULT_MASK_VALUE);
    if z.values.iter().all(|&v| v == sentinel) {
        return Err(SimplexError::EmptySupport);
    }
    Ok(())
}

/// `(m, ln sum_j exp(x_j - m))` with `m` the maximum; the sum is evaluated as
/// `log1p` of the non-maximal terms so a dominant entry loses no digits.
fn shifted_lse<S: Real>(xs: &[S]) -> (S, S) {
    let (mut m, mut at) = (S::neg_infinity(), 0);
    for (i, &x) in xs.iter().enumerate() {
        if x > m {
            m = x;
            at = i;
        }
    }
    if m == S::neg_infinity() {
        return (m, S::zero());
    }
    let rest: S = xs.iter().enumerate().filter(|&(i, _)| i != at).map(|(_, &x)| (x - m).exp()).sum();
    (m, rest.ln_1p())
}

/// `ln sum_j exp(x_j)`, shifted by the maximum. Entries may be `-inf`.
pub fn log_sum_exp<S: Real>(xs: &[S]) -> S {
    let (m, l) = shifted_lse(xs);
    m + l
}

pub fn softmax<S: Real>(z: &LogitVector<S>) -> Result<ProbVector<S>> {
    check_support(z)?;
    let m = z.max();
    let e: Vec<S> = z.values.iter().map(|&v| (v - m).exp()).collect();
    let s: S = e.iter().copied().sum();
    Ok(ProbVector { values: e.into_iter().map(|v| v / s).collect() })
}

pub fn log_softmax<S: Real>(z: &LogitVector<S>) -> Result<LogProbVector<S>> {
    check_support(z)?;
    let (m, l) = shifted_lse(&z.values);
    Ok(LogProbVector { values: z.values.iter().map(|&v| (v - m) - l).collect() })
}

/// `d/dz_k log softmax(z)_a = delta_ak - p_k`.
pub fn log_softmax_gradient<S: Real>(z: &LogitVector<S>, a: usize) -> Result<Vec<S>> {
    if a >= z.len() {
        return Err(SimplexError::IndexOutOfRange { index: a, size: z.len() });
    }
    let p = softmax(z)?;
    Ok(p.values
        .iter()
        .enumerate()
        .map(|(k, &pk)| if k == a { S::one() - pk } else { -pk })
        .collect())
}

/// Inverse-CDF draw from `p`. Deterministic given the stream state.
pub fn sample_categorical<S: Real>(p: &ProbVector<S>, rng: &mut RngStream) -> usize {
    sample_from_weights(p.as_slice(), rng)
}

pub(crate) fn sample_from_weights<S: Real>(w: &[S], rng: &mut RngStream) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in w.iter().enumerate() {
        let pi = pi.as_f64();
        if pi > 0.0 {
            last_positive = i;
            acc += pi;
            if u < acc {
                return i;
            }
        }
    }
    // rounding left u above the accumulated mass
    last_positive
}

/// `(1/2) sum_i |p_i - q_i|`.
pub fn tv_distance<S: Real>(p: &ProbVector<S>, q: &ProbVector<S>) -> Result<S> {
    if p.len() != q.len() {
        return Err(SimplexError::DimensionMismatch(p.len(), q.len()));
    }
    let s: S = p.values.iter().zip(&q.values).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(S::lit(0.5) * s)
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient<S, F>(mut f: F, theta: &[S], h: S) -> Result<Vec<S>>
where
    S: Real,
    F: FnMut(&[S]) -> S,
{
    if !(h > S::zero()) || !h.is_finite() {
        return Err(SimplexError::BadStep);
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let fp = f(&x);
        x[i] = theta[i] - h;
        let fm = f(&x);
        x[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SimplexError::NonFiniteValue(i));
        }
        grad.push((fp - fm) / (h + h));
    }
    Ok(grad)
}

/// Gradient-check tolerance `1e-5 * (1 + max|g|)`.
pub fn fd_tolerance<S: Real>(reference: &[S]) -> S {
    let inf = reference.iter().fold(S::zero(), |m, g| m.max(g.abs()));
    S::lit(1e-5) * (S::one() + inf)
}
