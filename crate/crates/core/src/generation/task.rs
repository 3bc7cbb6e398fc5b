use serde::{Deserialize, Serialize};

use super::GenerationError;

/// Binary outcome reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// 1 iff the generated sequence equals the prompt's target string.
    TargetMatch { targets: Vec<Vec<usize>> },
    /// 1 iff `sum(y) mod 2` equals the prompt's bit.
    Parity { bits: Vec<u8> },
    /// The same reward for every sequence; a degenerate task for sanity checks.
    Constant { value: u8 },
}

/// Prompts, horizon and reward of a toy generation task. Prompts are drawn
/// uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub prompts: usize,
    pub horizon: usize,
    pub reward: RewardKind,
    /// Emitting this token ends the episode early.
    #[serde(default)]
    pub terminal: Option<usize>,
}

impl TaskSpec {
    pub fn parity(bits: Vec<u8>, horizon: usize) -> Self {
        Self { prompts: bits.len(), horizon, reward: RewardKind::Parity { bits }, terminal: None }
    }

    pub fn target_match(targets: Vec<Vec<usize>>, horizon: usize) -> Self {
        Self { prompts: targets.len(), horizon, reward: RewardKind::TargetMatch { targets }, terminal: None }
    }

    pub fn validate(&self, vocab: usize) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::InvalidTask(m));
        if self.prompts == 0 || self.horizon == 0 {
            return bad("prompts and horizon must be positive".into());
        }
        if let Some(t) = self.terminal {
            if t >= vocab {
                return bad(format!("terminal token {t} >= vocab {vocab}"));
            }
        }
        match &self.reward {
            RewardKind::TargetMatch { targets } => {
                if targets.len() != self.prompts {
                    return bad(format!("{} targets for {} prompts", targets.len(), self.prompts));
                }
                for t in targets {
                    if t.is_empty() || t.len() > self.horizon || t.iter().any(|&a| a >= vocab) {
                        return bad(format!("target {t:?} is not a valid sequence"));
                    }
                }
            }
            RewardKind::Parity { bits } => {
                if bits.len() != self.prompts || bits.iter().any(|&b| b > 1) {
                    return bad(format!("parity bits {bits:?} invalid for {} prompts", self.prompts));
                }
            }
            RewardKind::Constant { value } => {
                if *value > 1 {
                    return bad(format!("constant reward must be 0 or 1, got {value}"));
                }
            }
        }
        Ok(())
    }

    /// `R(x, y)` in `{0, 1}`.
    pub fn reward(&self, prompt: usize, y: &[usize]) -> f64 {
        let hit = match &self.reward {
            RewardKind::TargetMatch { targets } => targets[prompt] == y,
            RewardKind::Parity { bits } => (y.iter().sum::<usize>() % 2) as u8 == bits[prompt],
            RewardKind::Constant { value } => *value == 1,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    /// Initial state of the reward automaton used by the forward recursion.
    pub(crate) fn tracker_start(&self) -> u8 {
        match self.reward {
            RewardKind::TargetMatch { .. } => 1,
            RewardKind::Parity { .. } | RewardKind::Constant { .. } => 0,
        }
    }

    /// Automaton update after emitting `token` at position `t` (0-based).
    pub(crate) fn tracker_step(&self, prompt: usize, state: u8, t: usize, token: usize) -> u8 {
        match &self.reward {
            RewardKind::TargetMatch { targets } => {
                let tgt = &targets[prompt];
                u8::from(state == 1 && t < tgt.len() && tgt[t] == token)
            }
            RewardKind::Parity { .. } => state ^ (token & 1) as u8,
            RewardKind::Constant { .. } => state,
        }
    }

    /// Reward of a finished sequence of length `len` given the automaton state.
    pub(crate) fn tracker_reward(&self, prompt: usize, state: u8, len: usize) -> f64 {
        let hit = match &self.reward {
            RewardKind::TargetMatch { targets } => state == 1 && len == targets[prompt].len(),
            RewardKind::Parity { bits } => state == bits[prompt],
            RewardKind::Constant { value } => *value == 1,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_terminal(&self, token: usize) -> bool {
        self.terminal == Some(token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_match_reward() {
        let t = TaskSpec::target_match(vec![vec![1, 0, 2]], 3);
        assert_eq!(t.reward(0, &[1, 0, 2]), 1.0);
        assert_eq!(t.reward(0, &[1, 0, 1]), 0.0);
        assert_eq!(t.reward(0, &[1, 0]), 0.0);
    }

    #[test]
    fn parity_reward() {
        let t = TaskSpec::parity(vec![0, 1], 2);
        assert_eq!(t.reward(0, &[1, 3]), 1.0);
        assert_eq!(t.reward(1, &[1, 3]), 0.0);
        assert_eq!(t.reward(1, &[2, 3]), 1.0);
    }

    #[test]
    fn tracker_agrees_with_reward() {
        let tasks = [TaskSpec::target_match(vec![vec![2, 1], vec![0, 0, 1]], 3), TaskSpec::parity(vec![1, 0], 3)];
        for task in &tasks {
            for prompt in 0..2 {
                for code in 0..27usize {
                    let y = [code % 3, (code / 3) % 3, code / 9];
                    for len in 1..=3 {
                        let mut s = task.tracker_start();
                        for (t, &a) in y[..len].iter().enumerate() {
                            s = task.tracker_step(prompt, s, t, a);
                        }
                        assert_eq!(task.tracker_reward(prompt, s, len), task.reward(prompt, &y[..len]));
                    }
                }
            }
        }
    }

    #[test]
    fn validation() {
        assert!(TaskSpec::parity(vec![0, 2], 2).validate(4).is_err());
        assert!(TaskSpec::target_match(vec![vec![5]], 2).validate(4).is_err());
        assert!(TaskSpec::target_match(vec![vec![1, 1, 1]], 2).validate(4).is_err());
        let mut t = TaskSpec::parity(vec![0], 2);
        t.terminal = Some(4);
        assert!(t.validate(4).is_err());
        assert!(TaskSpec::parity(vec![0, 1], 2).validate(4).is_ok());
    }
}
