//! Monte Carlo policy-gradient estimators over a batch of sampled trajectories.

use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::generation::{dp, PolicyPair, Trajectory, View};
use crate::pruning::DEFAULT_RHO;

type Result<T> = std::result::Result<T, EstimatorError>;

pub const DEFAULT_TIS_CLIP: f64 = 2.0;
pub const DEFAULT_MIS_CLIP: f64 = 5.0;
pub const DEFAULT_GROUP_SIZE: usize = 16;

fn default_tis_clip() -> f64 {
    DEFAULT_TIS_CLIP
}

fn default_mis_clip() -> f64 {
    DEFAULT_MIS_CLIP
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

/// `A_i = R_i - mean_{j != i} R_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(EstimatorError::GroupTooSmall(g));
    }
    let total: f64 = rewards.iter().sum();
    let denom = (g - 1) as f64;
    Ok(rewards.iter().map(|&r| r - (total - r) / denom).collect())
}

/// What multiplies each trajectory's score function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advantage {
    /// Leave-one-out baseline within each group.
    #[default]
    Rloo,
    /// The raw reward, no baseline.
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Sample from the inference policy, differentiate the training policy.
    Naive,
    /// Per-token ratio `pi_train / pi_infer` truncated at `clip`.
    Tis {
        #[serde(default = "default_tis_clip")]
        clip: f64,
    },
    /// Per-token ratio kept only inside `[1/clip, clip]`.
    Mis {
        #[serde(default = "default_mis_clip")]
        clip: f64,
    },
    /// Min-p pruned sampling and optimization with a sequence-level ratio of
    /// the constrained policies.
    Dvp {
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

impl Default for EstimatorKind {
    fn default() -> Self {
        EstimatorKind::Dvp { rho: DEFAULT_RHO }
    }
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Tis { .. } => "tis",
            EstimatorKind::Mis { .. } => "mis",
            EstimatorKind::Dvp { .. } => "dvp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorKind::Naive => Ok(()),
            EstimatorKind::Tis { clip } | EstimatorKind::Mis { clip } => {
                if clip.is_finite() && clip > 1.0 {
                    Ok(())
                } else {
                    Err(EstimatorError::BadConfig(format!("clip must be a finite value > 1, got {clip}")))
                }
            }
            EstimatorKind::Dvp { rho } => {
                if rho > 0.0 && rho <= 1.0 {
                    Ok(())
                } else {
                    Err(EstimatorError::BadConfig(format!("rho must lie in (0, 1], got {rho}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(flatten)]
    pub kind: EstimatorKind,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub advantage: Advantage,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { kind: EstimatorKind::default(), group_size: DEFAULT_GROUP_SIZE, advantage: Advantage::Rloo }
    }
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, group_size: usize, advantage: Advantage) -> Self {
        Self { kind, group_size, advantage }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if self.advantage == Advantage::Rloo && self.group_size < 2 {
            return Err(EstimatorError::GroupTooSmall(self.group_size));
        }
        if self.group_size == 0 {
            return Err(EstimatorError::GroupTooSmall(0));
        }
        Ok(())
    }
}

/// Batch statistics reported alongside an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean of `|delta_y|` over the batch.
    pub mean_abs_delta: f64,
    /// Largest importance weight seen. Naive: `exp|delta_y|` of the sequence
    /// ratio it ignores. TIS/MIS: largest per-token weight applied. DVP:
    /// largest sequence ratio applied.
    pub max_is_ratio: f64,
    /// MIS: fraction of tokens dropped. DVP: fraction of zero-weight
    /// trajectories. Zero otherwise.
    pub zero_weight_fraction: f64,
    /// DVP trajectories that were training-safe but left the inference safe set.
    pub bias_leaks: usize,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Same layout as the policy's logit table.
    pub vector: Vec<f64>,
    pub estimator: EstimatorKind,
    pub n_samples: usize,
    pub seed: u64,
    pub diagnostics: Diagnostics,
}

impl GradientEstimate {
    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Per-trajectory bookkeeping returned by [`add_contribution`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Contribution {
    /// Largest weight applied (or ignored, for the naive estimator).
    pub max_weight: f64,
    /// Tokens whose weight was forced to zero.
    pub dropped_tokens: usize,
    /// Whole trajectory weighted zero.
    pub zero_weight: bool,
    pub bias_leak: bool,
}

/// Next-token distributions of the training policy (constrained for DVP) for
/// every row, shared by all trajectories of a batch.
pub struct ScoreCache {
    vocab: usize,
    dists: Vec<Vec<f64>>,
}

impl ScoreCache {
    pub fn new(pair: &PolicyPair, kind: &EstimatorKind) -> Result<Self> {
        let view = match *kind {
            EstimatorKind::Dvp { rho } => View::TrainMp { rho },
            _ => View::Train,
        };
        let dists = (0..pair.base.rows())
            .map(|r| dp::row_distribution(pair, view, r))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { vocab: pair.base.vocab(), dists })
    }

    fn add_step(&self, row: usize, token: usize, scale: f64, out: &mut [f64]) {
        let v = self.vocab;
        for (k, (o, &p)) in out[row * v..(row + 1) * v].iter_mut().zip(&self.dists[row]).enumerate() {
            let e = if k == token { 1.0 } else { 0.0 };
            *o += scale * (e - p);
        }
    }
}

/// `out += scale * (weighted score of traj)` for estimator `kind`.
pub fn add_contribution(
    kind: &EstimatorKind,
    cache: &ScoreCache,
    traj: &Trajectory,
    scale: f64,
    out: &mut [f64],
) -> Result<Contribution> {
    let mut c = Contribution::default();
    match *kind {
        EstimatorKind::Naive => {
            c.max_weight = traj.delta_y.abs().exp();
            if scale != 0.0 {
                for s in &traj.steps {
                    cache.add_step(s.row, s.token, scale, out);
                }
            }
        }
        EstimatorKind::Tis { clip } => {
            for s in &traj.steps {
                let w = s.delta().exp().min(clip);
                c.max_weight = c.max_weight.max(w);
                if scale != 0.0 {
                    cache.add_step(s.row, s.token, scale * w, out);
                }
            }
        }
        EstimatorKind::Mis { clip } => {
            for s in &traj.steps {
                let r = s.delta().exp();
                let w = if r >= 1.0 / clip && r <= clip { r } else { 0.0 };
                if w == 0.0 {
                    c.dropped_tokens += 1;
                }
                c.max_weight = c.max_weight.max(w);
                if scale != 0.0 && w != 0.0 {
                    cache.add_step(s.row, s.token, scale * w, out);
                }
            }
        }
        EstimatorKind::Dvp { rho } => {
            if rho != traj.rho {
                return Err(EstimatorError::RhoMismatch { estimator: rho, trajectory: traj.rho });
            }
            if traj.steps.iter().any(|s| !s.safe_train) {
                c.zero_weight = true;
                return Ok(c);
            }
            if traj.steps.iter().any(|s| !s.safe_infer) {
                c.zero_weight = true;
                c.bias_leak = true;
                return Ok(c);
            }
            let log_ratio: f64 = traj.steps.iter().map(|s| s.logp_train_mp - s.logp_infer_mp).sum();
            let w = log_ratio.exp();
            c.max_weight = w;
            if scale != 0.0 {
                for s in &traj.steps {
                    cache.add_step(s.row, s.token, scale * w, out);
                }
            }
        }
    }
    Ok(c)
}

/// Advantages for a batch split into consecutive groups of `group_size`.
pub fn batch_advantages(batch: &[Trajectory], config: &EstimatorConfig) -> Result<Vec<f64>> {
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    match config.advantage {
        Advantage::Reward => Ok(rewards),
        Advantage::Rloo => {
            if !batch.len().is_multiple_of(config.group_size) {
                return Err(EstimatorError::BadConfig(format!(
                    "batch of {} is not a multiple of group size {}",
                    batch.len(),
                    config.group_size
                )));
            }
            let mut out = Vec::with_capacity(batch.len());
            for chunk in rewards.chunks(config.group_size) {
                out.extend(rloo_advantages(chunk)?);
            }
            Ok(out)
        }
    }
}

/// `(1/N) sum_i A_i * weighted score_i`, summed in batch order.
pub fn estimate(config: &EstimatorConfig, batch: &[Trajectory], pair: &PolicyPair, seed: u64) -> Result<GradientEstimate> {
    config.validate()?;
    if batch.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let adv = batch_advantages(batch, config)?;
    let cache = ScoreCache::new(pair, &config.kind)?;
    let n = batch.len() as f64;
    let mut vector = vec![0.0; pair.base.num_params()];
    let mut d = Diagnostics::default();
    let mut dropped = 0usize;
    let mut zero = 0usize;
    for (traj, &a) in batch.iter().zip(&adv) {
        let c = add_contribution(&config.kind, &cache, traj, a / n, &mut vector)?;
        d.max_is_ratio = d.max_is_ratio.max(c.max_weight);
        d.mean_abs_delta += traj.delta_y.abs() / n;
        d.n_tokens += traj.len();
        dropped += c.dropped_tokens;
        zero += usize::from(c.zero_weight);
        d.bias_leaks += usize::from(c.bias_leak);
    }
    d.zero_weight_fraction = match config.kind {
        EstimatorKind::Mis { .. } if d.n_tokens > 0 => dropped as f64 / d.n_tokens as f64,
        EstimatorKind::Dvp { .. } => zero as f64 / n,
        _ => 0.0,
    };
    Ok(GradientEstimate { vector, estimator: config.kind, n_samples: batch.len(), seed, diagnostics: d })
}

/// Sample mean and per-coordinate standard error of the per-trajectory terms
/// `A_i * weighted score_i`.
pub fn mean_and_standard_error(
    config: &EstimatorConfig,
    batch: &[Trajectory],
    pair: &PolicyPair,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    if batch.len() < 2 {
        return Err(EstimatorError::EmptyBatch);
    }
    let adv = batch_advantages(batch, config)?;
    let cache = ScoreCache::new(pair, &config.kind)?;
    let p = pair.base.num_params();
    let mut sum = vec![0.0; p];
    let mut sum_sq = vec![0.0; p];
    let mut term = vec![0.0; p];
    for (traj, &a) in batch.iter().zip(&adv) {
        term.iter_mut().for_each(|x| *x = 0.0);
        add_contribution(&config.kind, &cache, traj, a, &mut term)?;
        for k in 0..p {
            sum[k] += term[k];
            sum_sq[k] += term[k] * term[k];
        }
    }
    let n = batch.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(&sq, &m)| (((sq / n - m * m) * n / (n - 1.0)).max(0.0) / n).sqrt())
        .collect();
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{rollout_batch, PolicyInit, Realization, Sampler, TabularPolicy, TaskSpec};
    use crate::perturbation::PerturbationModel;
    use crate::rng::RngStream;

    #[test]
    fn rloo_examples() {
        assert_eq!(rloo_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert!(rloo_advantages(&[0.3; 4]).unwrap().iter().all(|a| a.abs() < 1e-15));
        let a = rloo_advantages(&[1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(a.iter().sum::<f64>().abs() < 1e-15);
        assert_eq!(rloo_advantages(&[1.0]), Err(EstimatorError::GroupTooSmall(1)));
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorKind::Tis { clip: 1.0 }.validate().is_err());
        assert!(EstimatorKind::Mis { clip: f64::INFINITY }.validate().is_err());
        assert!(EstimatorKind::Dvp { rho: 0.0 }.validate().is_err());
        assert!(EstimatorConfig::new(EstimatorKind::Naive, 1, Advantage::Rloo).validate().is_err());
        assert!(EstimatorConfig::new(EstimatorKind::Naive, 1, Advantage::Reward).validate().is_ok());
    }

    #[test]
    fn config_json_shape() {
        let c: EstimatorConfig = serde_json::from_str(r#"{"kind":"tis","group_size":8}"#).unwrap();
        assert_eq!(c.kind, EstimatorKind::Tis { clip: 2.0 });
        assert_eq!(c.advantage, Advantage::Rloo);
        let back: EstimatorConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    fn setup(eps: f64) -> (PolicyPair, TaskSpec) {
        let task = TaskSpec::parity(vec![0, 1], 3);
        let mut base = TabularPolicy::new(2, 4, 1, 3).unwrap();
        base.initialize(&PolicyInit::Gaussian { scale: 1.0 }, &mut RngStream::new(21, 0)).unwrap();
        let mut pair = PolicyPair::new(base, PerturbationModel::BoundedUniform { eps_max: eps }, Realization::FixedPerRow);
        pair.realize(&mut RngStream::new(22, 0));
        (pair, task)
    }

    #[test]
    fn degenerate_case_all_agree() {
        let (pair, task) = setup(0.0);
        let rho = 1e-300;
        let batch = rollout_batch(&pair, &task, Sampler::MinP, rho, 64, &RngStream::new(1, 0)).unwrap();
        let kinds = [
            EstimatorKind::Naive,
            EstimatorKind::Tis { clip: 2.0 },
            EstimatorKind::Mis { clip: 5.0 },
            EstimatorKind::Dvp { rho },
        ];
        let ests: Vec<_> = kinds
            .iter()
            .map(|&k| estimate(&EstimatorConfig::new(k, 16, Advantage::Rloo), &batch, &pair, 1).unwrap())
            .collect();
        for e in &ests[1..] {
            for (a, b) in e.vector.iter().zip(&ests[0].vector) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_rewards_give_zero_vector() {
        let (pair, task) = setup(0.1);
        let zero = TaskSpec { reward: crate::generation::RewardKind::Constant { value: 0 }, ..task };
        let batch = rollout_batch(&pair, &zero, Sampler::Raw, DEFAULT_RHO, 32, &RngStream::new(1, 0)).unwrap();
        let e = estimate(&EstimatorConfig::new(EstimatorKind::Naive, 16, Advantage::Reward), &batch, &pair, 0).unwrap();
        assert!(e.vector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tis_weights_never_exceed_clip() {
        let (pair, task) = setup(1.0);
        let batch = rollout_batch(&pair, &task, Sampler::Raw, DEFAULT_RHO, 64, &RngStream::new(2, 0)).unwrap();
        let e = estimate(&EstimatorConfig::new(EstimatorKind::Tis { clip: 1.5 }, 16, Advantage::Rloo), &batch, &pair, 0)
            .unwrap();
        assert!(e.diagnostics.max_is_ratio <= 1.5);
    }

    #[test]
    fn mis_drop_fraction_counts_tokens() {
        let (pair, task) = setup(1.0);
        let batch = rollout_batch(&pair, &task, Sampler::Raw, DEFAULT_RHO, 64, &RngStream::new(3, 0)).unwrap();
        let clip = 1.3;
        let e = estimate(&EstimatorConfig::new(EstimatorKind::Mis { clip }, 16, Advantage::Rloo), &batch, &pair, 0)
            .unwrap();
        let out: usize = batch
            .iter()
            .flat_map(|t| &t.steps)
            .filter(|s| {
                let r = s.delta().exp();
                r < 1.0 / clip || r > clip
            })
            .count();
        let total: usize = batch.iter().map(|t| t.len()).sum();
        assert_eq!(e.diagnostics.zero_weight_fraction, out as f64 / total as f64);
        assert!((0.0..=1.0).contains(&e.diagnostics.zero_weight_fraction));
    }

    #[test]
    fn dvp_rejects_mismatched_rho() {
        let (pair, task) = setup(0.1);
        let batch = rollout_batch(&pair, &task, Sampler::MinP, 0.1, 16, &RngStream::new(3, 0)).unwrap();
        let cfg = EstimatorConfig::new(EstimatorKind::Dvp { rho: 0.2 }, 16, Advantage::Rloo);
        assert!(matches!(estimate(&cfg, &batch, &pair, 0), Err(EstimatorError::RhoMismatch { .. })));
    }
}
