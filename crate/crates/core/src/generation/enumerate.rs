use super::trajectory::scripted;
use super::{GenerationError, PolicyPair, TaskSpec, Trajectory, View};
use crate::pruning::DEFAULT_RHO;

/// Largest per-prompt sequence count the oracle will list.
pub const ENUMERATION_CAP: usize = 1_000_000;

/// A complete sequence with its exact probability under the requested view,
/// including the uniform prompt weight `1 / prompts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumerated {
    pub trajectory: Trajectory,
    pub prob: f64,
}

fn sequence_count(vocab: usize, horizon: usize) -> usize {
    (0..horizon).fold(1usize, |n, _| n.saturating_mul(vocab))
}

pub fn check_cap(vocab: usize, horizon: usize) -> Result<(), GenerationError> {
    let n = sequence_count(vocab, horizon);
    if n > ENUMERATION_CAP {
        return Err(GenerationError::EnumerationCap { size: n, cap: ENUMERATION_CAP });
    }
    Ok(())
}

/// Every complete sequence of every prompt, in lexicographic order, with its
/// probability under `view`. Sequences outside a constrained view's support
/// are listed with probability 0. Inference views read the pair's stored
/// realization. Safe-set flags use the view's `rho` (the default for
/// unconstrained views).
pub fn enumerate_trajectories(pair: &PolicyPair, task: &TaskSpec, view: View) -> Result<Vec<Enumerated>, GenerationError> {
    task.validate(pair.base.vocab())?;
    check_cap(pair.base.vocab(), task.horizon)?;
    let rho = view.rho().unwrap_or(DEFAULT_RHO);
    let weight = 1.0 / task.prompts as f64;
    let mut out = Vec::new();
    for prompt in 0..task.prompts {
        let root = pair.base.row_of(prompt, &[])?;
        let mut rows = vec![root];
        let mut tokens: Vec<usize> = Vec::with_capacity(task.horizon);
        dfs(pair, task, prompt, view, rho, weight, &mut rows, &mut tokens, &mut out)?;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn dfs(
    pair: &PolicyPair,
    task: &TaskSpec,
    prompt: usize,
    view: View,
    rho: f64,
    weight: f64,
    rows: &mut Vec<usize>,
    tokens: &mut Vec<usize>,
    out: &mut Vec<Enumerated>,
) -> Result<(), GenerationError> {
    let row = *rows.last().expect("non-empty row stack");
    for a in 0..pair.base.vocab() {
        tokens.push(a);
        let done = task.is_terminal(a) || tokens.len() == task.horizon;
        if done {
            let trajectory = scripted(pair, task, prompt, &rows[..tokens.len()], tokens, rho)?;
            let prob = weight * trajectory.logp(view).exp();
            out.push(Enumerated { trajectory, prob });
        } else {
            let next = pair
                .base
                .successor(row, a)
                .ok_or_else(|| GenerationError::UnmappedState { prompt, history: tokens.clone() })?;
            rows.push(next);
            dfs(pair, task, prompt, view, rho, weight, rows, tokens, out)?;
            rows.pop();
        }
        tokens.pop();
    }
    Ok(())
}
