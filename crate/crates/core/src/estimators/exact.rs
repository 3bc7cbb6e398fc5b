//! Exact objectives, gradients and biases by enumerating every sequence.

use super::EstimatorError;
use crate::generation::{dp, enumerate_trajectories, PolicyPair, TaskSpec, Trajectory, View};

type Result<T> = std::result::Result<T, EstimatorError>;

/// Per-row next-token distributions used by the score function of `view`.
struct ScoreTable {
    vocab: usize,
    dists: Vec<Vec<f64>>,
}

impl ScoreTable {
    fn new(pair: &PolicyPair, view: View) -> Result<Self> {
        let dists = (0..pair.base.rows()).map(|r| dp::row_distribution(pair, view, r)).collect::<std::result::Result<_, _>>()?;
        Ok(Self { vocab: pair.base.vocab(), dists })
    }

    /// `out += scale * sum_t (e_{y_t} - pi(. | s_t))` over the logit table.
    fn add_score(&self, traj: &Trajectory, scale: f64, out: &mut [f64]) {
        let v = self.vocab;
        for s in &traj.steps {
            let row = &mut out[s.row * v..(s.row + 1) * v];
            for (k, (o, &p)) in row.iter_mut().zip(&self.dists[s.row]).enumerate() {
                let e = if k == s.token { 1.0 } else { 0.0 };
                *o += scale * (e - p);
            }
        }
    }
}

/// `sum_y P_view(y) R(y)`.
pub fn exact_objective(pair: &PolicyPair, task: &TaskSpec, view: View) -> Result<f64> {
    let e = enumerate_trajectories(pair, task, view)?;
    Ok(e.iter().map(|x| x.prob * x.trajectory.reward).sum())
}

/// `sum_y P_view(y) R(y) grad log P_view(y)`, with safe sets held fixed for
/// constrained views.
pub fn exact_gradient(pair: &PolicyPair, task: &TaskSpec, view: View) -> Result<Vec<f64>> {
    let table = ScoreTable::new(pair, view)?;
    let mut g = vec![0.0; pair.base.num_params()];
    for x in enumerate_trajectories(pair, task, view)? {
        if x.prob > 0.0 && x.trajectory.reward != 0.0 {
            table.add_score(&x.trajectory, x.prob * x.trajectory.reward, &mut g);
        }
    }
    Ok(g)
}

/// `g' - g`: sampling from the inference policy while differentiating the
/// training policy, minus the true gradient. Both terms are enumerated.
pub fn bias_direct(pair: &PolicyPair, task: &TaskSpec) -> Result<Vec<f64>> {
    let table = ScoreTable::new(pair, View::Train)?;
    let mut g_prime = vec![0.0; pair.base.num_params()];
    for x in enumerate_trajectories(pair, task, View::Infer)? {
        if x.trajectory.reward != 0.0 {
            table.add_score(&x.trajectory, x.prob * x.trajectory.reward, &mut g_prime);
        }
    }
    let g = exact_gradient(pair, task, View::Train)?;
    Ok(g_prime.iter().zip(&g).map(|(a, b)| a - b).collect())
}

/// `E_train[(exp(-delta_y) - 1) R grad log pi_train(y)]`.
pub fn bias_formula(pair: &PolicyPair, task: &TaskSpec) -> Result<Vec<f64>> {
    bias_formula_signed(pair, task, 1.0)
}

/// [`bias_formula`] with the exponent scaled by `sign`; `-1` is a deliberate
/// fault used to check that verification catches a broken identity.
#[doc(hidden)]
pub fn bias_formula_signed(pair: &PolicyPair, task: &TaskSpec, sign: f64) -> Result<Vec<f64>> {
    let table = ScoreTable::new(pair, View::Train)?;
    let mut b = vec![0.0; pair.base.num_params()];
    for x in enumerate_trajectories(pair, task, View::Train)? {
        let tr = &x.trajectory;
        if tr.reward != 0.0 {
            table.add_score(tr, x.prob * (-sign * tr.delta_y).exp_m1() * tr.reward, &mut b);
        }
    }
    Ok(b)
}

/// `T (1 - Z_min)` for a binary reward.
pub fn objective_bias_bound(pair: &PolicyPair, task: &TaskSpec, rho: f64) -> Result<f64> {
    let zmin = dp::min_retained_mass(pair, task, rho)?;
    Ok(task.horizon as f64 * (1.0 - zmin))
}

/// The expectation of the pruned estimator without a baseline:
/// `sum over y in the inference support of pi_train_mp(y) R(y) grad log pi_train_mp(y)`.
pub fn exact_gradient_in_support(pair: &PolicyPair, task: &TaskSpec, rho: f64) -> Result<Vec<f64>> {
    let view = View::TrainMp { rho };
    let table = ScoreTable::new(pair, view)?;
    let mut g = vec![0.0; pair.base.num_params()];
    for x in enumerate_trajectories(pair, task, view)? {
        let tr = &x.trajectory;
        if x.prob > 0.0 && tr.reward != 0.0 && tr.steps.iter().all(|s| s.safe_infer) {
            table.add_score(tr, x.prob * tr.reward, &mut g);
        }
    }
    Ok(g)
}
