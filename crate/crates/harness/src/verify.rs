//! Numerical verification suites with measured residuals.
//!
//! Every check draws its random instances from its own substream of the
//! configured seed, so the text report is a pure function of the settings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use dvp_core::estimators::{self, Advantage, EstimatorConfig, EstimatorKind};
use dvp_core::generation::{rollout_batch, PolicyInit, PolicyPair, Realization, Sampler, TabularPolicy, TaskSpec, View};
use dvp_core::perturbation::{
    linearized_inflation, map_perturbation, mode_mismatch, posterior_gradient, segment_sup_bounds, token_mismatch,
    PerturbationModel, MAP_MAX_ITER,
};
use dvp_core::pruning::{constrained_policy, contrastive_gradient, mask_logits, minp_safe_set, DEFAULT_RHO};
use dvp_core::simplex::{finite_diff_gradient, log_softmax, sample_categorical, softmax, tv_distance, DEFAULT_MASK_VALUE};
use dvp_core::{LogitVector, RngStream};

use crate::stats::median;
use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub seed: u64,
    pub bias_instances: usize,
    /// Draws per `eps_max` value.
    pub vulnerability_draws: usize,
    pub segment_grid: usize,
    pub probability_bins: usize,
    pub map_rows: usize,
    pub tail_events: usize,
    pub tail_sigma: f64,
    pub masked_rows: usize,
    pub gradient_rows: usize,
    pub bound_instances: usize,
    pub tv_rows: usize,
    pub unbiased_instances: usize,
    pub unbiased_samples: usize,
    /// Deliberately break the bias formula (test-only mutation check).
    pub inject_fault: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            bias_instances: 50,
            vulnerability_draws: 10_000,
            segment_grid: 64,
            probability_bins: 10,
            map_rows: 1_000,
            tail_events: 100_000,
            tail_sigma: 0.1,
            masked_rows: 10_000,
            gradient_rows: 100,
            bound_instances: 100,
            tv_rows: 1_000,
            unbiased_instances: 10,
            unbiased_samples: 10_000,
            inject_fault: false,
        }
    }
}

impl VerifySettings {
    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("invalid verify config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity compared against `tolerance`.
    pub residual: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub detail: String,
}

impl Check {
    fn at_most(name: &'static str, residual: f64, tolerance: f64, cases: usize, detail: String) -> Self {
        Self { name, passed: residual <= tolerance, residual, tolerance, cases, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} residual={:.6e} tolerance={:.1e} cases={} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.residual,
            self.tolerance,
            self.cases,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub settings: VerifySettings,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "verify seed={}", self.settings.seed);
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), failed);
        s
    }
}

pub fn run(settings: &VerifySettings) -> Result<VerificationReport> {
    let mut checks = vec![bias_identity(settings)?];
    checks.extend(vulnerability(settings)?);
    checks.extend(map_signature(settings)?);
    checks.push(tail_inflation(settings)?);
    checks.push(masked_logits(settings)?);
    checks.push(contrastive(settings)?);
    checks.push(bias_bound(settings)?);
    checks.push(tv_retained_mass(settings)?);
    checks.push(pruned_unbiased(settings)?);
    Ok(VerificationReport { settings: settings.clone(), checks })
}

// ---- random instance helpers ----

fn stream(settings: &VerifySettings, label: u64) -> RngStream {
    RngStream::new(settings.seed, 0).substream(1000 + label)
}

fn uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

fn int(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.next_index(hi - lo + 1)
}

fn normals(rng: &mut RngStream, n: usize, sd: f64) -> Vec<f64> {
    PerturbationModel::Gaussian { sigma: sd }.draw(n, rng)
}

fn logits(rng: &mut RngStream, v: usize, sd: f64) -> LogitVector {
    LogitVector::new(normals(rng, v, sd)).expect("finite draws")
}

fn log_uniform(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    uniform(rng, lo.ln(), hi.ln()).exp()
}

/// Random enumerable instance: `V <= max_v`, `T <= max_t`, up to two
/// prompts, context order up to 2, parity or target reward, Gaussian policy
/// and a fixed per-row Gaussian perturbation.
pub fn random_instance(rng: &mut RngStream, max_v: usize, min_t: usize, max_t: usize) -> Result<(PolicyPair, TaskSpec)> {
    let v = int(rng, 2, max_v);
    let t = int(rng, min_t, max_t);
    let prompts = int(rng, 1, 2);
    let k = int(rng, 0, 2);
    let task = if rng.next_index(2) == 0 {
        TaskSpec::parity((0..prompts).map(|_| rng.next_index(2) as u8).collect(), t)
    } else {
        TaskSpec::target_match((0..prompts).map(|_| (0..t).map(|_| rng.next_index(v)).collect()).collect(), t)
    };
    let mut base = TabularPolicy::new(prompts, v, k, t)?;
    base.initialize(&PolicyInit::Gaussian { scale: uniform(rng, 0.5, 3.0) }, rng)?;
    let sigma = uniform(rng, 0.05, 0.5);
    let mut pair = PolicyPair::new(base, PerturbationModel::Gaussian { sigma }, Realization::FixedPerRow);
    pair.realize(rng);
    Ok((pair, task))
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

// ---- suites ----

/// Direct enumeration of `g' - g` against the reweighting formula.
pub fn bias_identity(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 1);
    let sign = if settings.inject_fault { -1.0 } else { 1.0 };
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for _ in 0..settings.bias_instances {
        let (pair, task) = random_instance(&mut rng, 4, 1, 3)?;
        let direct = estimators::bias_direct(&pair, &task)?;
        let formula = estimators::bias_formula_signed(&pair, &task, sign)?;
        worst = worst.max(inf_dist(&direct, &formula));
        scale = scale.max(direct.iter().fold(0.0, |m, b| m.max(b.abs())));
    }
    Ok(Check::at_most("bias_identity", worst, 1e-10, settings.bias_instances, format!("max|bias|={scale:.3e}")))
}

/// `|delta_a|` against the segment bound for every token, and the per-bin
/// maxima of `|delta_a|` against `p_a`.
pub fn vulnerability(settings: &VerifySettings) -> Result<Vec<Check>> {
    let mut rng = stream(settings, 2);
    let bins = settings.probability_bins.max(1);
    let mut excess = f64::NEG_INFINITY;
    let mut trend_violation = f64::NEG_INFINITY;
    let mut cases = 0;
    let eps_values = [1e-4, 1e-3, 1e-2];
    for &eps_max in &eps_values {
        let mut bin_max = vec![f64::NAN; bins];
        let model = PerturbationModel::BoundedUniform { eps_max };
        for _ in 0..settings.vulnerability_draws {
            let v = int(&mut rng, 2, 64);
            let z = logits(&mut rng, v, 3.0);
            let eps = model.draw(v, &mut rng);
            let zi = z.add(&eps)?;
            let bounds = segment_sup_bounds(&z, &eps, settings.segment_grid)?;
            for a in 0..v {
                let m = token_mismatch(&z, &zi, a)?;
                excess = excess.max(m.delta.abs() - bounds[a]);
                let b = ((m.p_train * bins as f64) as usize).min(bins - 1);
                bin_max[b] = if bin_max[b].is_nan() { m.delta.abs() } else { bin_max[b].max(m.delta.abs()) };
            }
            cases += 1;
        }
        let filled: Vec<f64> = bin_max.into_iter().filter(|x| !x.is_nan()).collect();
        for w in filled.windows(2) {
            trend_violation = trend_violation.max((w[1] - w[0]) / eps_max);
        }
    }
    Ok(vec![
        Check::at_most("vulnerability_bound", excess, 1e-12, cases, "max(|delta|-bound)".into()),
        Check::at_most(
            "vulnerability_trend",
            trend_violation.max(0.0),
            0.0,
            cases,
            format!("{bins} bins, largest rise of bin max / eps_max"),
        ),
    ])
}

/// MAP perturbation given a sampled token: convergence, stationarity, and the
/// closed-form inflation at the mode.
pub fn map_signature(settings: &VerifySettings) -> Result<Vec<Check>> {
    let mut rng = stream(settings, 3);
    let sigmas = [0.01, 0.1, 0.3, 1.0];
    let mut failures = 0usize;
    let mut grad_norm = 0.0f64;
    let mut rel = 0.0f64;
    let mut exact_gap = 0.0f64;
    for i in 0..settings.map_rows {
        let sigma = sigmas[i % sigmas.len()];
        let v = int(&mut rng, 2, 16);
        let sd = uniform(&mut rng, 0.5, 3.0);
        let z = logits(&mut rng, v, sd);
        let a = rng.next_index(v);
        let eps = match map_perturbation(&z, a, sigma, MAP_MAX_ITER, 1e-10 * sigma * sigma) {
            Ok(e) => e,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let g = posterior_gradient(&z, a, sigma, &eps)?;
        grad_norm = grad_norm.max(g.iter().fold(0.0, |m, x| m.max(x.abs())));
        let p = softmax(&z)?;
        let zi = z.add(&eps)?;
        let p_prime = softmax(&zi)?;
        let mode = mode_mismatch(&p, &p_prime, sigma, a)?;
        let lin = linearized_inflation(&p, &eps, a);
        rel = rel.max((lin - mode).abs() / mode.abs());
        if sigma <= 0.01 {
            let exact = -token_mismatch(&z, &zi, a)?.delta;
            exact_gap = exact_gap.max((exact - mode).abs() / (sigma.powi(4) * v as f64));
        }
    }
    let n = settings.map_rows;
    Ok(vec![
        Check::at_most(
            "map_stationary",
            if failures > 0 { f64::INFINITY } else { grad_norm },
            1e-8,
            n,
            format!("{failures} not converged"),
        ),
        Check::at_most(
            "map_mode_mismatch",
            rel,
            1e-6,
            n,
            format!("first-order; exact gap at sigma=0.01 is {exact_gap:.3}*sigma^4*V"),
        ),
    ])
}

/// Sampled tail tokens (`p_a < 0.01`) are, in the median, inflated by the
/// inference engine: `log p'_a - log p_a > 0`.
pub fn tail_inflation(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 4);
    let model = PerturbationModel::Gaussian { sigma: settings.tail_sigma };
    let mut events = Vec::with_capacity(settings.tail_events);
    let mut draws = 0usize;
    while events.len() < settings.tail_events {
        let z = logits(&mut rng, 32, 2.0);
        let eps = model.draw(32, &mut rng);
        let zi = z.add(&eps)?;
        let a = sample_categorical(&softmax(&zi)?, &mut rng);
        let m = token_mismatch(&z, &zi, a)?;
        if m.p_train < 0.01 {
            events.push(-m.delta);
        }
        draws += 1;
    }
    let med = median(&events).unwrap_or(f64::NAN);
    Ok(Check {
        name: "tail_inflation",
        passed: med > 0.0,
        residual: med,
        tolerance: 0.0,
        cases: events.len(),
        detail: format!("median must be > 0; sigma={} draws={draws}", settings.tail_sigma),
    })
}

/// Finite-sentinel masking against exact renormalization.
pub fn masked_logits(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 5);
    let rhos = [DEFAULT_RHO, 1e-3, 0.1, 0.5];
    let mut worst = 0.0f64;
    for i in 0..settings.masked_rows {
        let v = int(&mut rng, 2, 64);
        let z = LogitVector::new((0..v).map(|_| uniform(&mut rng, -20.0, 20.0)).collect())?;
        let rho = rhos[i % rhos.len()];
        let set = minp_safe_set(&z, rho)?;
        let masked = softmax(&mask_logits(&z, &set, DEFAULT_MASK_VALUE))?;
        let exact = constrained_policy(&z, rho)?;
        worst = worst.max(inf_dist(masked.as_slice(), exact.as_slice()));
    }
    Ok(Check::at_most("masked_logits", worst, 1e-12, settings.masked_rows, "sup-norm".into()))
}

/// Contrastive gradient against central differences of the masked log-softmax.
pub fn contrastive(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 6);
    let rhos = [1e-3, 0.05, 0.3];
    let mut worst = 0.0f64;
    for i in 0..settings.gradient_rows {
        let v = int(&mut rng, 2, 10);
        let z = logits(&mut rng, v, 2.0);
        let rho = rhos[i % rhos.len()];
        let set = minp_safe_set(&z, rho)?;
        let members: Vec<usize> = set.members().collect();
        let a = members[rng.next_index(members.len())];
        let analytic = contrastive_gradient(&z, a, rho)?;
        let fd = finite_diff_gradient(
            |x| {
                let zz = LogitVector::new(x.to_vec()).expect("finite");
                log_softmax(&mask_logits(&zz, &set, DEFAULT_MASK_VALUE)).expect("non-empty").as_slice()[a]
            },
            z.as_slice(),
            1e-5,
        )?;
        worst = worst.max(inf_dist(&analytic, &fd));
    }
    Ok(Check::at_most("contrastive_gradient", worst, 1e-6, settings.gradient_rows, "vs central differences".into()))
}

/// `|J_mp - J| <= T (1 - Z_min)`.
pub fn bias_bound(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 7);
    let mut excess = f64::NEG_INFINITY;
    let mut tightest = f64::INFINITY;
    for _ in 0..settings.bound_instances {
        let (pair, task) = random_instance(&mut rng, 4, 1, 3)?;
        let rho = log_uniform(&mut rng, 1e-3, 0.9);
        let j = estimators::exact_objective(&pair, &task, View::Train)?;
        let j_mp = estimators::exact_objective(&pair, &task, View::TrainMp { rho })?;
        let bound = estimators::objective_bias_bound(&pair, &task, rho)?;
        excess = excess.max((j_mp - j).abs() - bound);
        if bound > 0.0 {
            tightest = tightest.min(bound - (j_mp - j).abs());
        }
    }
    Ok(Check::at_most(
        "objective_bias_bound",
        excess,
        1e-12,
        settings.bound_instances,
        format!("max(|J_mp-J|-bound); smallest slack {tightest:.3e}"),
    ))
}

/// One-step total variation between constrained and full policy is `1 - Z`.
pub fn tv_retained_mass(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 8);
    let mut worst = 0.0f64;
    for _ in 0..settings.tv_rows {
        let v = int(&mut rng, 2, 16);
        let sd = uniform(&mut rng, 0.5, 4.0);
        let z = logits(&mut rng, v, sd);
        let rho = log_uniform(&mut rng, 1e-4, 1.0);
        let set = minp_safe_set(&z, rho)?;
        let tv = tv_distance(&constrained_policy(&z, rho)?, &softmax(&z)?)?;
        worst = worst.max((tv - (1.0 - set.retained_mass())).abs());
    }
    Ok(Check::at_most("tv_one_minus_z", worst, 1e-12, settings.tv_rows, "|TV-(1-Z)|".into()))
}

/// Monte Carlo mean of the pruned estimator (no baseline) against its exact
/// expectation. Residual is `||mean - exact||_2 / (3 sqrt(sum SE^2))`.
pub fn pruned_unbiased(settings: &VerifySettings) -> Result<Check> {
    let mut rng = stream(settings, 9);
    let mut worst = 0.0f64;
    for i in 0..settings.unbiased_instances {
        let (mut pair, task) = random_instance(&mut rng, 4, 2, 3)?;
        pair.model = PerturbationModel::Gaussian { sigma: 0.3 };
        pair.realize(&mut rng);
        let rho = log_uniform(&mut rng, 0.02, 0.3);
        let base = rng.substream(i as u64);
        let batch = rollout_batch(&pair, &task, Sampler::MinP, rho, settings.unbiased_samples, &base)?;
        let cfg = EstimatorConfig::new(EstimatorKind::Dvp { rho }, 1, Advantage::Reward);
        let (mean, se) = estimators::mean_and_standard_error(&cfg, &batch, &pair)?;
        let exact = estimators::exact_gradient_in_support(&pair, &task, rho)?;
        let err: f64 = mean.iter().zip(&exact).map(|(m, e)| (m - e) * (m - e)).sum::<f64>().sqrt();
        let band = 3.0 * se.iter().map(|s| s * s).sum::<f64>().sqrt();
        let r = if err == 0.0 { 0.0 } else { err / band };
        worst = worst.max(r);
    }
    Ok(Check::at_most(
        "pruned_unbiased",
        worst,
        1.0,
        settings.unbiased_instances,
        format!("samples={}", settings.unbiased_samples),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifySettings {
        VerifySettings {
            bias_instances: 5,
            vulnerability_draws: 10_000,
            map_rows: 40,
            tail_events: 2_000,
            tail_sigma: 0.3,
            masked_rows: 200,
            gradient_rows: 10,
            bound_instances: 10,
            tv_rows: 50,
            unbiased_instances: 2,
            unbiased_samples: 2_000,
            ..VerifySettings::default()
        }
    }

    #[test]
    fn quick_suite_passes() {
        let r = run(&quick()).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn fault_is_detected() {
        let s = VerifySettings { inject_fault: true, ..quick() };
        let c = bias_identity(&s).unwrap();
        assert!(!c.passed);
    }

    #[test]
    fn report_is_deterministic() {
        let s = VerifySettings { bias_instances: 3, ..quick() };
        assert_eq!(run(&s).unwrap().to_text(), run(&s).unwrap().to_text());
    }

    #[test]
    fn settings_parse_partial() {
        let s: VerifySettings = serde_json::from_str(r#"{"seed":7,"map_rows":3}"#).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.map_rows, 3);
        assert_eq!(s.masked_rows, 10_000);
        assert!(serde_json::from_str::<VerifySettings>(r#"{"nope":1}"#).is_err());
    }
}
