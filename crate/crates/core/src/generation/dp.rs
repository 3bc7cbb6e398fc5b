//! Forward recursion over `(context row, reward-automaton state)`.
//!
//! Gives exact objectives at horizons far beyond what enumeration can list,
//! because the policy only sees the last `k` tokens and both rewards are
//! tracked by a two-state automaton.

use super::{GenerationError, PolicyPair, TaskSpec, View};
use crate::pruning::{minp_safe_set, restricted_softmax};
use crate::simplex::softmax;

/// Next-token distribution of row `r` under `view` (stored inference realization).
pub fn row_distribution(pair: &PolicyPair, view: View, r: usize) -> Result<Vec<f64>, GenerationError> {
    let z = if view.is_infer() { pair.infer_logits(r) } else { pair.train_logits(r) };
    Ok(match view.rho() {
        None => softmax(&z)?.into_vec(),
        Some(rho) => {
            let set = minp_safe_set(&z, rho)?;
            restricted_softmax(&z, set.mask()).into_vec()
        }
    })
}

/// `E[R]` under `view` with uniformly drawn prompts.
pub fn objective(pair: &PolicyPair, task: &TaskSpec, view: View) -> Result<f64, GenerationError> {
    task.validate(pair.base.vocab())?;
    let v = pair.base.vocab();
    let rows = pair.base.rows();
    let dists = (0..rows).map(|r| row_distribution(pair, view, r)).collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for prompt in 0..task.prompts {
        let root = pair.base.row_of(prompt, &[])?;
        let mut mass = vec![[0.0f64; 2]; rows];
        mass[root][task.tracker_start() as usize] = 1.0;
        let mut value = 0.0;
        for t in 0..task.horizon {
            let mut next = vec![[0.0f64; 2]; rows];
            for r in 0..rows {
                for s in 0..2u8 {
                    let m = mass[r][s as usize];
                    if m == 0.0 {
                        continue;
                    }
                    for a in 0..v {
                        let q = dists[r][a];
                        if q == 0.0 {
                            continue;
                        }
                        let s2 = task.tracker_step(prompt, s, t, a);
                        if task.is_terminal(a) || t + 1 == task.horizon {
                            value += m * q * task.tracker_reward(prompt, s2, t + 1);
                        } else {
                            let r2 = pair
                                .base
                                .successor(r, a)
                                .ok_or_else(|| GenerationError::UnmappedState { prompt, history: vec![a] })?;
                            next[r2][s2 as usize] += m * q;
                        }
                    }
                }
            }
            mass = next;
        }
        total += value;
    }
    Ok(total / task.prompts as f64)
}

/// `grad_theta E[R]` under `view`, safe sets held fixed for constrained views.
///
/// Forward state occupancies times backward advantages:
/// `d/d theta[r, b] = sum_{t, s} mu_t(r, s) pi(b | r) (Q_t(r, s, b) - V_t(r, s))`.
pub fn gradient(pair: &PolicyPair, task: &TaskSpec, view: View) -> Result<Vec<f64>, GenerationError> {
    task.validate(pair.base.vocab())?;
    let v = pair.base.vocab();
    let rows = pair.base.rows();
    let horizon = task.horizon;
    let dists = (0..rows).map(|r| row_distribution(pair, view, r)).collect::<Result<Vec<_>, _>>()?;
    let succ = |r: usize, a: usize, prompt: usize| {
        pair.base.successor(r, a).ok_or_else(|| GenerationError::UnmappedState { prompt, history: vec![a] })
    };
    let mut grad = vec![0.0; pair.base.num_params()];
    let weight = 1.0 / task.prompts as f64;
    for prompt in 0..task.prompts {
        let root = pair.base.row_of(prompt, &[])?;
        let mut mass = vec![vec![[0.0f64; 2]; rows]; horizon];
        mass[0][root][task.tracker_start() as usize] = 1.0;
        for t in 0..horizon.saturating_sub(1) {
            for r in 0..rows {
                for s in 0..2u8 {
                    let m = mass[t][r][s as usize];
                    if m == 0.0 {
                        continue;
                    }
                    for a in 0..v {
                        let q = dists[r][a];
                        if q == 0.0 || task.is_terminal(a) {
                            continue;
                        }
                        let s2 = task.tracker_step(prompt, s, t, a);
                        mass[t + 1][succ(r, a, prompt)?][s2 as usize] += m * q;
                    }
                }
            }
        }
        // value[r][s] at step t + 1, filled backwards
        let mut later = vec![[0.0f64; 2]; rows];
        let mut q_row = vec![0.0; v];
        for t in (0..horizon).rev() {
            let mut now = vec![[0.0f64; 2]; rows];
            for r in 0..rows {
                for s in 0..2u8 {
                    let mut val = 0.0;
                    for a in 0..v {
                        let s2 = task.tracker_step(prompt, s, t, a);
                        q_row[a] = if task.is_terminal(a) || t + 1 == horizon {
                            task.tracker_reward(prompt, s2, t + 1)
                        } else {
                            match pair.base.successor(r, a) {
                                Some(r2) => later[r2][s2 as usize],
                                None => 0.0,
                            }
                        };
                        val += dists[r][a] * q_row[a];
                    }
                    now[r][s as usize] = val;
                    let m = mass[t][r][s as usize];
                    if m != 0.0 {
                        for (b, g) in grad[r * v..(r + 1) * v].iter_mut().enumerate() {
                            *g += weight * m * dists[r][b] * (q_row[b] - val);
                        }
                    }
                }
            }
            later = now;
        }
    }
    Ok(grad)
}

/// Rows that some prefix of length `< horizon` can reach (terminal tokens end
/// the episode).
pub fn reachable_rows(pair: &PolicyPair, task: &TaskSpec) -> Result<Vec<usize>, GenerationError> {
    let rows = pair.base.rows();
    let mut depth = vec![usize::MAX; rows];
    let mut queue = std::collections::VecDeque::new();
    for prompt in 0..task.prompts {
        let r = pair.base.row_of(prompt, &[])?;
        depth[r] = 0;
        queue.push_back(r);
    }
    while let Some(r) = queue.pop_front() {
        if depth[r] + 1 >= task.horizon {
            continue;
        }
        for a in 0..pair.base.vocab() {
            if task.is_terminal(a) {
                continue;
            }
            if let Some(r2) = pair.base.successor(r, a) {
                if depth[r2] == usize::MAX {
                    depth[r2] = depth[r] + 1;
                    queue.push_back(r2);
                }
            }
        }
    }
    Ok((0..rows).filter(|&r| depth[r] != usize::MAX).collect())
}

/// `min_s Z(s)` of the training safe sets over reachable states.
pub fn min_retained_mass(pair: &PolicyPair, task: &TaskSpec, rho: f64) -> Result<f64, GenerationError> {
    let mut zmin = 1.0f64;
    for r in reachable_rows(pair, task)? {
        let set = minp_safe_set(&pair.train_logits(r), rho)?;
        zmin = zmin.min(set.retained_mass());
    }
    Ok(zmin)
}
