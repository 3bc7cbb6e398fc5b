//! Experiment configuration.
//!
//! A config file is a JSON object. Missing keys take the defaults of the
//! `parity` preset; a top-level `"preset": "<name>"` key switches the base to
//! another preset before the remaining keys are merged in (objects merge
//! recursively, everything else replaces).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dvp_core::estimators::{Advantage, EstimatorConfig, EstimatorKind};
use dvp_core::generation::{PolicyInit, Realization, Sampler, TabularPolicy, TaskSpec};
use dvp_core::perturbation::PerturbationModel;
use dvp_core::pruning::DEFAULT_RHO;

use crate::{HarnessError, Result};

/// Threshold used by the collapse preset: `e^-1`.
pub const COLLAPSE_RHO: f64 = 0.367_879_441_171_442_33;

pub const PRESETS: &[&str] = &["parity", "collapse", "collapse_dvp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab: usize,
    pub context_order: usize,
    pub init: PolicyInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskSpec,
    pub policy: PolicyConfig,
    pub perturbation: PerturbationModel,
    pub realization: Realization,
    pub estimator: EstimatorConfig,
    /// Safe-set threshold for flags and the `J_mp` metric. A `dvp` estimator
    /// overrides it with its own `rho`.
    pub rho: f64,
    /// Groups of `estimator.group_size` trajectories per iteration.
    pub groups: usize,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub format: MetricsFormat,
    /// Record wall-clock milliseconds per iteration (breaks byte-identical output).
    pub timing: bool,
    /// Compute the exact-gradient error column when `prompts * V^T` is at most this.
    pub grad_error_cap: usize,
    /// Metrics destination; `--out` overrides it.
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parity()
    }
}

impl ExperimentConfig {
    /// Eight-token parity task, small enough for every exact diagnostic.
    pub fn parity() -> Self {
        Self {
            name: "parity".into(),
            task: TaskSpec::parity(vec![0, 1], 4),
            policy: PolicyConfig { vocab: 8, context_order: 1, init: PolicyInit::Gaussian { scale: 2.5 } },
            perturbation: PerturbationModel::Gaussian { sigma: 0.1 },
            realization: Realization::FixedPerRow,
            estimator: EstimatorConfig::new(EstimatorKind::Dvp { rho: DEFAULT_RHO }, 16, Advantage::Rloo),
            rho: DEFAULT_RHO,
            groups: 4,
            lr: 0.5,
            iterations: 500,
            seed: 0,
            format: MetricsFormat::Csv,
            timing: false,
            grad_error_cap: 100_000,
            out: None,
        }
    }

    /// Long-horizon parity with a confident copy prior, a heavy flat tail and
    /// per-visit noise: the naive estimator's sequence ratio explodes.
    pub fn collapse() -> Self {
        Self {
            name: "collapse".into(),
            task: TaskSpec::parity(vec![0, 1], 47),
            policy: PolicyConfig {
                vocab: 32,
                context_order: 1,
                init: PolicyInit::CopyPrior { head: 4.0, jitter: 0.1, fork: vec![0, 1] },
            },
            perturbation: PerturbationModel::Gaussian { sigma: 0.3 },
            realization: Realization::ResampleEachState,
            estimator: EstimatorConfig::new(EstimatorKind::Naive, 16, Advantage::Rloo),
            rho: COLLAPSE_RHO,
            groups: 2,
            lr: 0.02,
            iterations: 300,
            seed: 0,
            format: MetricsFormat::Csv,
            timing: false,
            grad_error_cap: 100_000,
            out: None,
        }
    }

    /// [`collapse`](Self::collapse) trained with the pruned estimator.
    pub fn collapse_dvp() -> Self {
        let mut c = Self::collapse();
        c.name = "collapse_dvp".into();
        c.estimator.kind = EstimatorKind::Dvp { rho: COLLAPSE_RHO };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "parity" => Ok(Self::parity()),
            "collapse" => Ok(Self::collapse()),
            "collapse_dvp" => Ok(Self::collapse_dvp()),
            other => Err(HarnessError::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(user)
    }

    pub fn from_value(mut user: Value) -> Result<Self> {
        let obj = user
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config("config must be a JSON object".into()))?;
        let base = match obj.remove("preset") {
            None => Self::parity(),
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(HarnessError::Config(format!("preset must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, user);
        let config: Self =
            serde_json::from_value(merged).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.task.validate(self.policy.vocab).map_err(|e| HarnessError::Config(e.to_string()))?;
        self.perturbation.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.estimator.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        TabularPolicy::new(self.task.prompts, self.policy.vocab, self.policy.context_order, self.task.horizon)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !self.lr.is_finite() {
            return bad(format!("lr must be finite, got {}", self.lr));
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        Ok(())
    }

    /// Rollout sampler implied by the estimator.
    pub fn sampler(&self) -> Sampler {
        match self.estimator.kind {
            EstimatorKind::Dvp { .. } => Sampler::MinP,
            _ => Sampler::Raw,
        }
    }

    /// Threshold for safe-set flags and `J_mp`.
    pub fn effective_rho(&self) -> f64 {
        match self.estimator.kind {
            EstimatorKind::Dvp { rho } => rho,
            _ => self.rho,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.groups * self.estimator.group_size
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                // tagged enums switch variant wholesale when their tag changes
                let switches_variant = matches!((b.get(&k), &v), (Some(Value::Object(old)), Value::Object(new))
                    if new.get("kind").is_some_and(|t| Some(t) != old.get("kind")));
                match b.get_mut(&k) {
                    Some(slot) if !switches_variant => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn collapse_rho_is_e_minus_one() {
        assert!((COLLAPSE_RHO - (-1.0f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn partial_override() {
        let c = ExperimentConfig::from_json_str(r#"{"preset":"collapse","lr":0.5,"task":{"horizon":9}}"#).unwrap();
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.task.horizon, 9);
        assert_eq!(c.policy.vocab, 32);
    }

    #[test]
    fn tagged_enum_switch() {
        let c = ExperimentConfig::from_json_str(r#"{"estimator":{"kind":"mis"}}"#).unwrap();
        assert_eq!(c.estimator.kind, EstimatorKind::Mis { clip: 5.0 });
        assert_eq!(c.sampler(), Sampler::Raw);
        let c = ExperimentConfig::from_json_str(r#"{"perturbation":{"kind":"bounded_uniform","eps_max":0.01}}"#).unwrap();
        assert_eq!(c.perturbation, PerturbationModel::BoundedUniform { eps_max: 0.01 });
    }

    #[test]
    fn config_errors() {
        for bad in [
            "[]",
            "{",
            r#"{"preset":"nope"}"#,
            r#"{"lr":"fast"}"#,
            r#"{"unknown_key":1}"#,
            r#"{"rho":0}"#,
            r#"{"estimator":{"kind":"tis","clip":0.5}}"#,
            r#"{"task":{"reward":{"kind":"parity","bits":[0]}}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json_str(bad), Err(HarnessError::Config(_))), "{bad}");
        }
    }
}
