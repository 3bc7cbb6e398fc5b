use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::GenerationError;
use crate::rng::RngStream;
use crate::simplex::LogitVector;

/// Largest logit table we are willing to allocate.
pub const MAX_TABLE_ENTRIES: usize = 1 << 24;

/// How the logit table is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyInit {
    /// All logits zero (uniform policy).
    Uniform,
    /// `theta ~ Normal(0, scale^2)`.
    Gaussian { scale: f64 },
    /// Confident "continue the pattern" prior: each row puts `head` extra
    /// logit on the last context token, prompt-root rows put it on every
    /// `fork` token, and every entry gets `Normal(0, jitter^2)` noise.
    CopyPrior { head: f64, jitter: f64, fork: Vec<usize> },
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit::Gaussian { scale: 1.0 }
    }
}

/// Softmax policy with one logit row per context `(prompt, last k tokens)`.
///
/// Context keys shorter than `k` occur only at the start of an episode. The
/// key-to-row map is an explicit table over every reachable key.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: usize,
    prompts: usize,
    context_order: usize,
    theta: Vec<f64>,
    keys: Vec<(usize, Vec<usize>)>,
    index: BTreeMap<(usize, Vec<usize>), usize>,
    /// `rows x vocab` successor rows, `NONE` where the context does not exist.
    next: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl TabularPolicy {
    /// Zero-initialized policy covering every context reachable within `horizon` steps.
    pub fn new(prompts: usize, vocab: usize, context_order: usize, horizon: usize) -> Result<Self, GenerationError> {
        if vocab < 2 {
            return Err(GenerationError::InvalidShape(format!("vocab must be >= 2, got {vocab}")));
        }
        if prompts == 0 || horizon == 0 {
            return Err(GenerationError::InvalidShape("prompts and horizon must be positive".into()));
        }
        let max_len = context_order.min(horizon - 1);
        let mut per_prompt = 0usize;
        let mut level = 1usize;
        for _ in 0..=max_len {
            per_prompt = per_prompt.saturating_add(level);
            level = level.saturating_mul(vocab);
        }
        let rows = per_prompt.saturating_mul(prompts);
        if rows.saturating_mul(vocab) > MAX_TABLE_ENTRIES {
            return Err(GenerationError::InvalidShape(format!("{rows} context rows x {vocab} tokens is too large")));
        }
        let mut keys = Vec::with_capacity(rows);
        for p in 0..prompts {
            let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
            for _ in 0..=max_len {
                let mut next = Vec::new();
                for key in frontier {
                    if key.len() < max_len {
                        for a in 0..vocab {
                            let mut k = key.clone();
                            k.push(a);
                            next.push(k);
                        }
                    }
                    keys.push((p, key));
                }
                frontier = next;
            }
        }
        let index: BTreeMap<(usize, Vec<usize>), usize> = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        let mut next = vec![NONE; rows * vocab];
        for (r, (p, key)) in keys.iter().enumerate() {
            for a in 0..vocab {
                let mut k = key.clone();
                k.push(a);
                if k.len() > context_order {
                    k.remove(0);
                }
                if let Some(&r2) = index.get(&(*p, k)) {
                    next[r * vocab + a] = r2;
                }
            }
        }
        Ok(Self { vocab, prompts, context_order, theta: vec![0.0; rows * vocab], keys, index, next })
    }

    pub fn initialize(&mut self, init: &PolicyInit, rng: &mut RngStream) -> Result<(), GenerationError> {
        let v = self.vocab;
        match init {
            PolicyInit::Uniform => self.theta.iter_mut().for_each(|t| *t = 0.0),
            PolicyInit::Gaussian { scale } => {
                for t in self.theta.iter_mut() {
                    let g: f64 = StandardNormal.sample(rng);
                    *t = scale * g;
                }
            }
            PolicyInit::CopyPrior { head, jitter, fork } => {
                if let Some(&bad) = fork.iter().find(|&&a| a >= v) {
                    return Err(GenerationError::InvalidShape(format!("fork token {bad} >= vocab {v}")));
                }
                for r in 0..self.rows() {
                    let row = &mut self.theta[r * v..(r + 1) * v];
                    for t in row.iter_mut() {
                        let g: f64 = StandardNormal.sample(rng);
                        *t = jitter * g;
                    }
                    match self.keys[r].1.last() {
                        Some(&last) => row[last] += head,
                        None => fork.iter().for_each(|&a| row[a] += head),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<(), GenerationError> {
        if theta.len() != self.theta.len() {
            return Err(GenerationError::InvalidShape(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.theta[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn row_logits(&self, r: usize) -> LogitVector<f64> {
        LogitVector::new(self.row(r).to_vec()).expect("policy logits are finite")
    }

    /// `(prompt, context key)` of row `r`.
    pub fn context_key(&self, r: usize) -> (usize, &[usize]) {
        let (p, k) = &self.keys[r];
        (*p, k)
    }

    /// Row used after `history` has been generated for `prompt`.
    pub fn row_of(&self, prompt: usize, history: &[usize]) -> Result<usize, GenerationError> {
        let start = history.len().saturating_sub(self.context_order);
        let key = (prompt, history[start..].to_vec());
        self.index
            .get(&key)
            .copied()
            .ok_or_else(|| GenerationError::UnmappedState { prompt, history: history.to_vec() })
    }

    /// Row reached from row `r` after emitting `token`, if that context exists.
    pub fn successor(&self, r: usize, token: usize) -> Option<usize> {
        match self.next[r * self.vocab + token] {
            NONE => None,
            r2 => Some(r2),
        }
    }

    pub fn next_logits(&self, prompt: usize, history: &[usize]) -> Result<LogitVector<f64>, GenerationError> {
        Ok(self.row_logits(self.row_of(prompt, history)?))
    }

    /// True when every logit is finite.
    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|t| t.is_finite())
    }
}
