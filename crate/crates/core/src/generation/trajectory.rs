use serde::{Deserialize, Serialize};

use super::{GenerationError, TabularPolicy, TaskSpec};
use crate::perturbation::{token_mismatch, PerturbationModel};
use crate::pruning::{minp_safe_set, restricted_log_softmax, DEFAULT_RHO};
use crate::rng::RngStream;
use crate::simplex::{log_softmax, sample_from_weights, LogitVector};

/// When the inference-side perturbation is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realization {
    /// One draw per context row, held until the next [`PolicyPair::realize`].
    #[default]
    FixedPerRow,
    /// A fresh draw every time a state is visited during a rollout.
    ResampleEachState,
}

/// A training policy and its perturbed inference twin.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub base: TabularPolicy,
    pub model: PerturbationModel,
    pub realization: Realization,
    eps: Vec<f64>,
}

impl PolicyPair {
    /// Pair with a zero perturbation table; call [`realize`](Self::realize) to draw one.
    pub fn new(base: TabularPolicy, model: PerturbationModel, realization: Realization) -> Self {
        let eps = vec![0.0; base.num_params()];
        Self { base, model, realization, eps }
    }

    /// Pair with an explicit perturbation table (`rows x V`, row-major).
    pub fn with_eps(base: TabularPolicy, eps: Vec<f64>) -> Result<Self, GenerationError> {
        if eps.len() != base.num_params() {
            return Err(GenerationError::InvalidShape(format!(
                "eps table has {} entries, expected {}",
                eps.len(),
                base.num_params()
            )));
        }
        if eps.iter().any(|e| !e.is_finite()) {
            return Err(GenerationError::InvalidShape("eps table must be finite".into()));
        }
        let model = PerturbationModel::BoundedUniform { eps_max: eps.iter().fold(0.0, |m, e| m.max(e.abs())) };
        Ok(Self { base, model, realization: Realization::FixedPerRow, eps })
    }

    /// Redraw the per-row perturbation table. Resampling pairs also keep a
    /// table; exact (enumerated) inference views read it.
    pub fn realize(&mut self, rng: &mut RngStream) {
        self.eps = self.model.draw(self.base.num_params(), rng);
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn eps_row(&self, r: usize) -> &[f64] {
        let v = self.base.vocab();
        &self.eps[r * v..(r + 1) * v]
    }

    pub fn train_logits(&self, r: usize) -> LogitVector<f64> {
        self.base.row_logits(r)
    }

    /// Inference logits of row `r` under the stored realization.
    pub fn infer_logits(&self, r: usize) -> LogitVector<f64> {
        self.base.row_logits(r).add(self.eps_row(r)).expect("finite logits plus finite noise")
    }

    /// Inference logits for a visit to row `r` during a rollout.
    fn visit_logits(&self, r: usize, rng: &mut RngStream) -> LogitVector<f64> {
        match self.realization {
            Realization::FixedPerRow => self.infer_logits(r),
            Realization::ResampleEachState => {
                let eps = self.model.draw(self.base.vocab(), rng);
                self.base.row_logits(r).add(&eps).expect("finite logits plus finite noise")
            }
        }
    }
}

/// Which distribution a sequence probability is taken under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum View {
    Train,
    Infer,
    TrainMp { rho: f64 },
    InferMp { rho: f64 },
}

impl View {
    pub fn rho(&self) -> Option<f64> {
        match *self {
            View::TrainMp { rho } | View::InferMp { rho } => Some(rho),
            _ => None,
        }
    }

    pub fn is_infer(&self) -> bool {
        matches!(self, View::Infer | View::InferMp { .. })
    }
}

/// How rollout tokens are drawn from the inference policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Full inference softmax.
    #[default]
    Raw,
    /// Inference policy renormalized over its min-p safe set.
    MinP,
}

/// Per-step log-probabilities of the sampled token under every view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub row: usize,
    pub token: usize,
    pub logp_train: f64,
    pub logp_infer: f64,
    /// `-inf` when the token is outside the training safe set.
    pub logp_train_mp: f64,
    /// `-inf` when the token is outside the inference safe set.
    pub logp_infer_mp: f64,
    pub safe_train: bool,
    pub safe_infer: bool,
    /// `ln Z` of the training safe set at this state.
    pub log_z_train: f64,
    pub log_z_infer: f64,
    /// `log pi_train(a) - log pi_infer(a)` from [`token_mismatch`].
    pub mismatch: f64,
}

impl StepRecord {
    fn new(row: usize, token: usize, z_train: &LogitVector<f64>, z_infer: &LogitVector<f64>, rho: f64) -> Result<Self, GenerationError> {
        let (lt, st) = step_logp(z_train, token, rho)?;
        let (li, si) = step_logp(z_infer, token, rho)?;
        Ok(Self {
            row,
            token,
            logp_train: lt.0,
            logp_infer: li.0,
            logp_train_mp: lt.1,
            logp_infer_mp: li.1,
            safe_train: st.0,
            safe_infer: si.0,
            log_z_train: st.1,
            log_z_infer: si.1,
            mismatch: token_mismatch(z_train, z_infer, token)?.delta,
        })
    }

    /// `logp_train - logp_infer`, evaluated without cancellation.
    pub fn delta(&self) -> f64 {
        self.mismatch
    }

    pub fn logp(&self, view: View) -> f64 {
        match view {
            View::Train => self.logp_train,
            View::Infer => self.logp_infer,
            View::TrainMp { .. } => self.logp_train_mp,
            View::InferMp { .. } => self.logp_infer_mp,
        }
    }
}

type StepLogp = ((f64, f64), (bool, f64));

fn step_logp(z: &LogitVector<f64>, a: usize, rho: f64) -> Result<StepLogp, GenerationError> {
    let lp = log_softmax(z)?;
    let set = minp_safe_set(z, rho)?;
    let safe = set.contains(a);
    let mp = if safe { lp.as_slice()[a] - set.log_retained_mass() } else { f64::NEG_INFINITY };
    Ok(((lp.as_slice()[a], mp), (safe, set.log_retained_mass())))
}

/// One generated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    /// `sum_t (logp_train_t - logp_infer_t)`.
    pub delta_y: f64,
    /// Threshold the safe-set flags were computed with.
    pub rho: f64,
}

impl Trajectory {
    fn finish(prompt: usize, steps: Vec<StepRecord>, task: &TaskSpec, rho: f64) -> Self {
        let tokens: Vec<usize> = steps.iter().map(|s| s.token).collect();
        let reward = task.reward(prompt, &tokens);
        let delta_y = steps.iter().map(StepRecord::delta).sum();
        Self { prompt, tokens, steps, reward, delta_y, rho }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Chain-rule log-probability under `view` from the stored records.
    /// Constrained views must use the threshold the trajectory was built with.
    pub fn logp(&self, view: View) -> f64 {
        if let Some(rho) = view.rho() {
            debug_assert_eq!(rho, self.rho, "records were built with a different rho");
        }
        self.steps.iter().map(|s| s.logp(view)).sum()
    }
}

/// Sample one episode for `prompt` from the inference policy.
///
/// Every step records both unconstrained log-probabilities and the safe-set
/// flags at threshold `rho`; with [`Sampler::MinP`] the same `rho` prunes the
/// sampling distribution.
pub fn rollout(
    pair: &PolicyPair,
    task: &TaskSpec,
    prompt: usize,
    sampler: Sampler,
    rho: f64,
    rng: &mut RngStream,
) -> Result<Trajectory, GenerationError> {
    if prompt >= task.prompts {
        return Err(GenerationError::InvalidTask(format!("prompt {prompt} out of range")));
    }
    let mut steps = Vec::with_capacity(task.horizon);
    let mut row = pair.base.row_of(prompt, &[])?;
    for t in 0..task.horizon {
        let z = pair.train_logits(row);
        let zi = pair.visit_logits(row, rng);
        let weights: Vec<f64> = match sampler {
            Sampler::Raw => log_softmax(&zi)?.exp().into_vec(),
            Sampler::MinP => {
                let set = minp_safe_set(&zi, rho)?;
                restricted_log_softmax(&zi, set.mask()).into_iter().map(f64::exp).collect()
            }
        };
        let a = sample_from_weights(&weights, rng);
        steps.push(StepRecord::new(row, a, &z, &zi, rho)?);
        if task.is_terminal(a) || t + 1 == task.horizon {
            break;
        }
        row = pair
            .base
            .successor(row, a)
            .ok_or_else(|| GenerationError::UnmappedState { prompt, history: steps.iter().map(|s| s.token).collect() })?;
    }
    Ok(Trajectory::finish(prompt, steps, task, rho))
}

/// Episode `index` of a batch: the prompt is drawn uniformly and all
/// randomness comes from substream `index` of `base`, so a batch does not
/// depend on how it is split across workers.
pub fn rollout_indexed(
    pair: &PolicyPair,
    task: &TaskSpec,
    sampler: Sampler,
    rho: f64,
    base: &RngStream,
    index: u64,
) -> Result<Trajectory, GenerationError> {
    let mut rng = base.substream(index);
    let prompt = rng.next_index(task.prompts);
    rollout(pair, task, prompt, sampler, rho, &mut rng)
}

pub fn rollout_batch(
    pair: &PolicyPair,
    task: &TaskSpec,
    sampler: Sampler,
    rho: f64,
    n: usize,
    base: &RngStream,
) -> Result<Vec<Trajectory>, GenerationError> {
    (0..n as u64).map(|i| rollout_indexed(pair, task, sampler, rho, base, i)).collect()
}

/// Group `group` of a batch: one prompt drawn from the group's substream and
/// `size` episodes for it, episode `i` using the group's substream `i`.
pub fn rollout_group(
    pair: &PolicyPair,
    task: &TaskSpec,
    sampler: Sampler,
    rho: f64,
    base: &RngStream,
    group: u64,
    size: usize,
) -> Result<Vec<Trajectory>, GenerationError> {
    let mut g = base.substream(group);
    let prompt = g.next_index(task.prompts);
    (0..size as u64)
        .map(|i| rollout(pair, task, prompt, sampler, rho, &mut g.substream(i)))
        .collect()
}

/// Recompute the chain-rule log-probability of `traj` under `view`, using the
/// stored inference realization of `pair`. `-inf` marks an out-of-support token.
pub fn sequence_logprob(view: View, pair: &PolicyPair, traj: &Trajectory) -> Result<f64, GenerationError> {
    let rho = view.rho().unwrap_or(DEFAULT_RHO);
    let mut total = 0.0;
    let mut row = pair.base.row_of(traj.prompt, &[])?;
    for (t, &a) in traj.tokens.iter().enumerate() {
        let z = if view.is_infer() { pair.infer_logits(row) } else { pair.train_logits(row) };
        let lp = match view {
            View::Train | View::Infer => log_softmax(&z)?.as_slice()[a],
            View::TrainMp { .. } | View::InferMp { .. } => {
                let set = minp_safe_set(&z, rho)?;
                restricted_log_softmax(&z, set.mask())[a]
            }
        };
        total += lp;
        if t + 1 < traj.tokens.len() {
            row = pair
                .base
                .successor(row, a)
                .ok_or_else(|| GenerationError::UnmappedState { prompt: traj.prompt, history: traj.tokens[..=t].to_vec() })?;
        }
    }
    Ok(total)
}

/// Build the trajectory record for a fixed token sequence under the stored
/// inference realization (used by the enumeration oracle).
pub(crate) fn scripted(
    pair: &PolicyPair,
    task: &TaskSpec,
    prompt: usize,
    rows: &[usize],
    tokens: &[usize],
    rho: f64,
) -> Result<Trajectory, GenerationError> {
    let steps = rows
        .iter()
        .zip(tokens)
        .map(|(&r, &a)| StepRecord::new(r, a, &pair.train_logits(r), &pair.infer_logits(r), rho))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory::finish(prompt, steps, task, rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::PolicyInit;

    fn pair(eps_max: f64, realization: Realization) -> (PolicyPair, TaskSpec) {
        let task = TaskSpec::parity(vec![0, 1], 3);
        let mut base = TabularPolicy::new(2, 4, 1, 3).unwrap();
        base.initialize(&PolicyInit::Gaussian { scale: 2.0 }, &mut RngStream::new(1, 0)).unwrap();
        let mut p = PolicyPair::new(base, PerturbationModel::BoundedUniform { eps_max }, realization);
        p.realize(&mut RngStream::new(2, 0));
        (p, task)
    }

    #[test]
    fn zero_noise_gives_zero_mismatch() {
        let (p, task) = pair(0.0, Realization::FixedPerRow);
        let base = RngStream::new(3, 0);
        for tr in rollout_batch(&p, &task, Sampler::Raw, DEFAULT_RHO, 50, &base).unwrap() {
            for s in &tr.steps {
                assert_eq!(s.logp_train, s.logp_infer);
            }
            assert_eq!(tr.delta_y, 0.0);
        }
    }

    #[test]
    fn minp_samples_stay_in_inference_safe_set() {
        let (p, task) = pair(0.5, Realization::ResampleEachState);
        let base = RngStream::new(3, 0);
        for tr in rollout_batch(&p, &task, Sampler::MinP, 0.2, 200, &base).unwrap() {
            assert!(tr.steps.iter().all(|s| s.safe_infer && s.logp_infer_mp.is_finite()));
        }
    }

    #[test]
    fn delta_y_is_sum_of_step_deltas() {
        let (p, task) = pair(0.3, Realization::FixedPerRow);
        for tr in rollout_batch(&p, &task, Sampler::Raw, DEFAULT_RHO, 100, &RngStream::new(5, 0)).unwrap() {
            let s: f64 = tr.steps.iter().map(|s| s.logp_train - s.logp_infer).sum();
            assert!((tr.delta_y - s).abs() <= 1e-10);
        }
    }

    #[test]
    fn greedy_path_for_one_hot_rows() {
        let task = TaskSpec::target_match(vec![vec![2, 2, 2]], 3);
        let mut base = TabularPolicy::new(1, 3, 1, 3).unwrap();
        let init = PolicyInit::CopyPrior { head: 800.0, jitter: 0.0, fork: vec![2] };
        base.initialize(&init, &mut RngStream::new(0, 0)).unwrap();
        let p = PolicyPair::new(base, PerturbationModel::none(), Realization::FixedPerRow);
        let tr = rollout(&p, &task, 0, Sampler::Raw, DEFAULT_RHO, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(tr.tokens, vec![2, 2, 2]);
        assert_eq!(tr.reward, 1.0);
        assert_eq!(sequence_logprob(View::Train, &p, &tr).unwrap(), 0.0);
    }

    #[test]
    fn stored_and_recomputed_logprobs_agree() {
        let (p, task) = pair(0.2, Realization::FixedPerRow);
        let rho = 0.05;
        for tr in rollout_batch(&p, &task, Sampler::MinP, rho, 100, &RngStream::new(6, 0)).unwrap() {
            for view in [View::Train, View::Infer, View::TrainMp { rho }, View::InferMp { rho }] {
                let a = tr.logp(view);
                let b = sequence_logprob(view, &p, &tr).unwrap();
                assert!(a == b || (a - b).abs() <= 1e-12, "{view:?}: {a} vs {b}");
            }
            if tr.steps.iter().all(|s| s.safe_train) {
                let logz: f64 = tr.steps.iter().map(|s| s.log_z_train).sum();
                assert!((tr.logp(View::TrainMp { rho }) - (tr.logp(View::Train) - logz)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn terminal_token_ends_episode() {
        let mut task = TaskSpec::parity(vec![0], 5);
        task.terminal = Some(0);
        let mut base = TabularPolicy::new(1, 2, 1, 5).unwrap();
        base.initialize(&PolicyInit::Uniform, &mut RngStream::new(0, 0)).unwrap();
        let p = PolicyPair::new(base, PerturbationModel::none(), Realization::FixedPerRow);
        for tr in rollout_batch(&p, &task, Sampler::Raw, DEFAULT_RHO, 200, &RngStream::new(1, 0)).unwrap() {
            let n = tr.len();
            assert!((1..=5).contains(&n));
            assert!(tr.tokens[..n - 1].iter().all(|&a| a != 0));
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let (p, task) = pair(0.3, Realization::ResampleEachState);
        let a = rollout_batch(&p, &task, Sampler::Raw, DEFAULT_RHO, 20, &RngStream::new(8, 1)).unwrap();
        let b = rollout_batch(&p, &task, Sampler::Raw, DEFAULT_RHO, 20, &RngStream::new(8, 1)).unwrap();
        assert_eq!(a, b);
    }
}
