//! Inference-engine error modeled as additive logit noise, `z_infer = z_train + eps`.
//!
//! Provides the noise models, the token-level log-probability mismatch
//! `delta_a = log p_a - log p'_a`, the `(1 - p)` vulnerability bound and the
//! MAP perturbation conditional on a token being sampled.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::scalar::Real;
use crate::simplex::{self, log_sum_exp, LogitVector, ProbVector, SimplexError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    #[error("invalid perturbation parameter: {0}")]
    BadParameter(String),
    #[error("fixed point did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64, last: Vec<f64> },
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

pub type Result<T> = std::result::Result<T, PerturbationError>;

/// Distribution of the per-logit error `eps_k` (iid across `k`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationModel {
    /// `eps_k ~ Uniform[-eps_max, eps_max]`.
    BoundedUniform { eps_max: f64 },
    /// `eps_k ~ Normal(0, sigma^2)`.
    Gaussian { sigma: f64 },
}

impl Default for PerturbationModel {
    fn default() -> Self {
        PerturbationModel::BoundedUniform { eps_max: 1e-3 }
    }
}

impl PerturbationModel {
    pub fn none() -> Self {
        PerturbationModel::BoundedUniform { eps_max: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            PerturbationModel::BoundedUniform { eps_max } => ("eps_max", eps_max),
            PerturbationModel::Gaussian { sigma } => ("sigma", sigma),
        };
        if !v.is_finite() || v < 0.0 {
            return Err(PerturbationError::BadParameter(format!("{name} must be finite and >= 0, got {v}")));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            PerturbationModel::BoundedUniform { eps_max } => eps_max == 0.0,
            PerturbationModel::Gaussian { sigma } => sigma == 0.0,
        }
    }

    /// Draw `n` iid perturbations.
    pub fn draw(&self, n: usize, rng: &mut RngStream) -> Vec<f64> {
        match *self {
            PerturbationModel::BoundedUniform { eps_max } => {
                (0..n).map(|_| eps_max * (2.0 * rng.next_f64() - 1.0)).collect()
            }
            PerturbationModel::Gaussian { sigma } => (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    sigma * g
                })
                .collect(),
        }
    }
}

/// `z + eps` with a fresh draw from `model`.
pub fn perturb<S: Real>(z: &LogitVector<S>, model: &PerturbationModel, rng: &mut RngStream) -> LogitVector<S> {
    let eps: Vec<S> = model.draw(z.len(), rng).into_iter().map(S::lit).collect();
    z.add(&eps).expect("finite logits plus finite noise")
}

/// Per-token comparison of the two policies at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchRecord<S> {
    pub token: usize,
    /// `log pi_train(a) - log pi_infer(a)`.
    pub delta: S,
    pub p_train: S,
    pub p_infer: S,
}

/// `ln sum_k p_k e^{eps_k}` evaluated as `log1p(sum_k p_k expm1(eps_k))`,
/// which stays accurate when the perturbation is tiny.
fn log_tilt<S: Real>(p: &[S], eps: &[S]) -> S {
    let s: S = p.iter().zip(eps).map(|(&pk, &e)| pk * e.exp_m1()).sum();
    s.ln_1p()
}

pub fn token_mismatch<S: Real>(
    z_train: &LogitVector<S>,
    z_infer: &LogitVector<S>,
    a: usize,
) -> Result<MismatchRecord<S>> {
    let v = z_train.len();
    if z_infer.len() != v {
        return Err(SimplexError::DimensionMismatch(v, z_infer.len()).into());
    }
    if a >= v {
        return Err(SimplexError::IndexOutOfRange { index: a, size: v }.into());
    }
    let p = simplex::softmax(z_train)?;
    let q = simplex::softmax(z_infer)?;
    let eps: Vec<S> = z_infer.as_slice().iter().zip(z_train.as_slice()).map(|(&b, &c)| b - c).collect();
    // log p_a - log p'_a = -eps_a + lse(z + eps) - lse(z)
    let delta = log_tilt(p.as_slice(), &eps) - eps[a];
    Ok(MismatchRecord { token: a, delta, p_train: p[a], p_infer: q[a] })
}

/// `2 eps_max (1 - p_a)`.
pub fn vulnerability_bound<S: Real>(p_a: S, eps_max: S) -> S {
    S::lit(2.0) * eps_max * (S::one() - p_a)
}

fn inf_norm<S: Real>(xs: &[S]) -> S {
    xs.iter().fold(S::zero(), |m, x| m.max(x.abs()))
}

/// Largest `2 ||eps||_inf (1 - softmax(z + t eps)_a)` over the grid
/// `t in {0, 1/n, ..., 1}`. The intermediate point of the mean-value argument
/// lies somewhere on this segment.
pub fn segment_sup_bound<S: Real>(z: &LogitVector<S>, eps: &[S], a: usize, grid_n: usize) -> Result<S> {
    if a >= z.len() {
        return Err(SimplexError::IndexOutOfRange { index: a, size: z.len() }.into());
    }
    Ok(segment_sup_bounds(z, eps, grid_n)?[a])
}

/// [`segment_sup_bound`] for every token at once; one softmax per grid point.
pub fn segment_sup_bounds<S: Real>(z: &LogitVector<S>, eps: &[S], grid_n: usize) -> Result<Vec<S>> {
    if grid_n < 2 {
        return Err(PerturbationError::BadParameter(format!("grid_n must be >= 2, got {grid_n}")));
    }
    if eps.len() != z.len() {
        return Err(SimplexError::DimensionMismatch(z.len(), eps.len()).into());
    }
    let eps_max = inf_norm(eps);
    let two = S::lit(2.0);
    let mut worst = vec![S::zero(); z.len()];
    let n = S::from_usize(grid_n).unwrap();
    let mut point = vec![S::zero(); z.len()];
    for i in 0..=grid_n {
        let t = S::from_usize(i).unwrap() / n;
        for k in 0..z.len() {
            point[k] = z[k] + t * eps[k];
        }
        let p = simplex::softmax(&LogitVector::new(point.clone())?)?;
        for (w, &pk) in worst.iter_mut().zip(p.as_slice()) {
            *w = w.max(two * eps_max * (S::one() - pk));
        }
    }
    Ok(worst)
}

/// Default fixed-point budget for [`map_perturbation`].
pub const MAP_MAX_ITER: usize = 1000;
pub const MAP_TOL: f64 = 1e-12;

/// Mode of the Gaussian-prior posterior over `eps` given that token `a` was
/// sampled from `softmax(z + eps)`: the self-consistent solution of
/// `eps_k = sigma^2 (delta_ak - softmax(z + eps)_k)`.
///
/// Iterates the map until the update's sup-norm falls below `tol`. The map
/// has Lipschitz constant at most `sigma^2 / 2`.
pub fn map_perturbation<S: Real>(
    z: &LogitVector<S>,
    a: usize,
    sigma: S,
    max_iter: usize,
    tol: S,
) -> Result<Vec<S>> {
    if !(sigma > S::zero()) || !sigma.is_finite() {
        return Err(PerturbationError::BadParameter(format!("sigma must be > 0, got {sigma}")));
    }
    if a >= z.len() {
        return Err(SimplexError::IndexOutOfRange { index: a, size: z.len() }.into());
    }
    let s2 = sigma * sigma;
    let mut eps = vec![S::zero(); z.len()];
    let mut residual = S::infinity();
    for _ in 0..max_iter {
        let p = simplex::softmax(&z.add(&eps)?)?;
        let next: Vec<S> = (0..z.len())
            .map(|k| s2 * (if k == a { S::one() } else { S::zero() } - p[k]))
            .collect();
        residual = eps.iter().zip(&next).fold(S::zero(), |m, (x, y)| m.max((*x - *y).abs()));
        eps = next;
        if residual < tol {
            return Ok(eps);
        }
    }
    Err(PerturbationError::NoConvergence {
        iterations: max_iter,
        residual: residual.as_f64(),
        last: eps.iter().map(|v| v.as_f64()).collect(),
    })
}

/// `log P(eps | a sampled)` up to a constant:
/// `(z_a + eps_a) - lse(z + eps) - |eps|^2 / (2 sigma^2)`.
pub fn posterior_log_density<S: Real>(z: &LogitVector<S>, a: usize, sigma: S, eps: &[S]) -> Result<S> {
    let shifted = z.add(eps)?;
    let sq: S = eps.iter().map(|&e| e * e).sum();
    Ok(shifted[a] - log_sum_exp(shifted.as_slice()) - sq / (S::lit(2.0) * sigma * sigma))
}

/// Gradient of [`posterior_log_density`]: `e_a - softmax(z + eps) - eps / sigma^2`.
pub fn posterior_gradient<S: Real>(z: &LogitVector<S>, a: usize, sigma: S, eps: &[S]) -> Result<Vec<S>> {
    let p = simplex::softmax(&z.add(eps)?)?;
    let s2 = sigma * sigma;
    Ok((0..z.len())
        .map(|k| if k == a { S::one() } else { S::zero() } - p[k] - eps[k] / s2)
        .collect())
}

/// `sigma^2 [(1 - p_a)(1 - p'_a) + sum_{k != a} p_k p'_k]`.
pub fn mode_mismatch<S: Real>(p: &ProbVector<S>, p_prime: &ProbVector<S>, sigma: S, a: usize) -> Result<S> {
    if p.len() != p_prime.len() {
        return Err(SimplexError::DimensionMismatch(p.len(), p_prime.len()).into());
    }
    if a >= p.len() {
        return Err(SimplexError::IndexOutOfRange { index: a, size: p.len() }.into());
    }
    let cross: S = (0..p.len()).filter(|&k| k != a).map(|k| p[k] * p_prime[k]).sum();
    Ok(sigma * sigma * ((S::one() - p[a]) * (S::one() - p_prime[a]) + cross))
}

/// First-order expansion of `-delta_a` around the training logits:
/// `(1 - p_a) eps_a - sum_{k != a} p_k eps_k`.
pub fn linearized_inflation<S: Real>(p: &ProbVector<S>, eps: &[S], a: usize) -> S {
    let rest: S = (0..p.len()).filter(|&k| k != a).map(|k| p[k] * eps[k]).sum();
    (S::one() - p[a]) * eps[a] - rest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::softmax;

    fn lv(v: &[f64]) -> LogitVector<f64> {
        LogitVector::from_f64(v).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let z = lv(&[0.3, -1.0, 2.0]);
        let mut rng = RngStream::new(1, 0);
        assert_eq!(perturb(&z, &PerturbationModel::none(), &mut rng), z);
    }

    #[test]
    fn bounded_support() {
        let m = PerturbationModel::BoundedUniform { eps_max: 0.01 };
        let mut rng = RngStream::new(3, 0);
        let eps = m.draw(10_000, &mut rng);
        assert!(eps.iter().all(|e| e.abs() <= 0.01));
    }

    #[test]
    fn gaussian_variance_interval() {
        // chi-square 3 sigma band for n = 1e5: 0.01 * (1 +- 3 sqrt(2/n)) = [0.00987, 0.01013]
        let m = PerturbationModel::Gaussian { sigma: 0.1 };
        let mut rng = RngStream::new(11, 0);
        let eps = m.draw(100_000, &mut rng);
        let n = eps.len() as f64;
        let mean = eps.iter().sum::<f64>() / n;
        let var = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.0097..=0.0103).contains(&var), "{var}");
    }

    #[test]
    fn bad_parameters() {
        assert!(PerturbationModel::Gaussian { sigma: -1.0 }.validate().is_err());
        assert!(PerturbationModel::BoundedUniform { eps_max: f64::NAN }.validate().is_err());
        assert!(PerturbationModel::default().validate().is_ok());
    }

    #[test]
    fn mismatch_invariances() {
        let z = lv(&[1.0, 0.0, -1.0]);
        assert_eq!(token_mismatch(&z, &z, 2).unwrap().delta, 0.0);
        let shifted = z.shifted(3.7);
        assert!(token_mismatch(&z, &shifted, 0).unwrap().delta.abs() < 1e-14);
        assert!(token_mismatch(&z, &z, 3).is_err());
    }

    #[test]
    fn mismatch_matches_log_ratio() {
        let z = lv(&[1.0, 0.0, -1.0]);
        let zi = z.add(&[0.01, -0.01, 0.0]).unwrap();
        for a in 0..3 {
            let r = token_mismatch(&z, &zi, a).unwrap();
            assert!((r.delta - (r.p_train.ln() - r.p_infer.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn vulnerability_values() {
        assert_eq!(vulnerability_bound(1.0, 0.3), 0.0);
        assert_eq!(vulnerability_bound(0.0, 0.25), 0.5);
        assert!((vulnerability_bound(0.5f64, 0.01) - 0.01).abs() < 1e-18);
    }

    #[test]
    fn segment_bound_at_zero_eps() {
        let z = lv(&[0.5, 0.1, -2.0]);
        let p = softmax(&z).unwrap();
        let eps = [0.0; 3];
        // eps = 0 gives eps_max = 0 and the bound collapses to 0
        assert_eq!(segment_sup_bound(&z, &eps, 1, 64).unwrap(), vulnerability_bound(p[1], 0.0));
        assert!(segment_sup_bound(&z, &eps, 1, 1).is_err());
    }

    #[test]
    fn map_sign_structure_uniform_row() {
        let z = lv(&[0.0; 4]);
        let eps = map_perturbation(&z, 0, 0.1, MAP_MAX_ITER, MAP_TOL).unwrap();
        assert!(eps[0] > 0.0);
        assert!(eps[1..].iter().all(|&e| e < 0.0));
    }

    #[test]
    fn map_vanishes_with_sigma() {
        let z = lv(&[0.3, -0.2, 1.0]);
        let eps = map_perturbation(&z, 1, 1e-6, MAP_MAX_ITER, MAP_TOL).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-11));
    }

    #[test]
    fn map_stationarity() {
        let z = lv(&[1.5, -0.3, 0.2, -2.0, 0.0]);
        let sigma = 0.3;
        let eps = map_perturbation(&z, 3, sigma, MAP_MAX_ITER, MAP_TOL).unwrap();
        let g = posterior_gradient(&z, 3, sigma, &eps).unwrap();
        assert!(inf_norm(&g) < 10.0 * MAP_TOL / (sigma * sigma));
    }

    #[test]
    fn map_reports_non_convergence() {
        let z = lv(&[0.0, 5.0, -5.0]);
        match map_perturbation(&z, 2, 1.0, 2, 1e-300) {
            Err(PerturbationError::NoConvergence { iterations, last, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(last.len(), 3);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
        assert!(map_perturbation(&z, 0, 0.0, 10, 1e-12).is_err());
    }

    #[test]
    fn mode_uniform_formula() {
        for k in 2..9usize {
            let u = ProbVector::<f64>::uniform(k);
            let m = mode_mismatch(&u, &u, 0.2, 0).unwrap();
            assert!((m - 0.04 * (1.0 - 1.0 / k as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn mode_vanishes_for_certain_token() {
        let p = ProbVector::<f64>::one_hot(3, 1);
        assert_eq!(mode_mismatch(&p, &p, 0.5, 1).unwrap(), 0.0);
    }
}
