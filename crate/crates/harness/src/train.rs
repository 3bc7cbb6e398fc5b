//! Sample, estimate, ascend.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use dvp_core::estimators::{self, EstimatorKind};
use dvp_core::generation::{check_cap, dp, rollout_group, PolicyPair, TabularPolicy, Trajectory, View};
use dvp_core::RngStream;

use crate::config::ExperimentConfig;
use crate::metrics::{self, finite, MetricsRow, STATUS_ABORT, STATUS_OK};
use crate::{pool, HarnessError, Result};

// substream labels
const INIT: u64 = 1;
const NOISE: u64 = 2;
const ROLLOUT: u64 = 3;

/// Logits this large make every softmax one-hot and overflow once noise is
/// added; treated as a numeric abort.
pub const MAX_LOGIT: f64 = 1e100;

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub policy: TabularPolicy,
    /// Set when a non-finite estimate or parameter stopped the run.
    pub abort: Option<HarnessError>,
}

impl TrainOutcome {
    pub fn completed(&self) -> bool {
        self.abort.is_none()
    }

    pub fn max_is_ratio(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| if r.status == STATUS_ABORT { f64::INFINITY } else { r.max_is_ratio.unwrap_or(f64::INFINITY) })
            .fold(0.0, f64::max)
    }
}

pub fn initial_pair(config: &ExperimentConfig) -> Result<PolicyPair> {
    let master = RngStream::new(config.seed, 0);
    let mut base = TabularPolicy::new(
        config.task.prompts,
        config.policy.vocab,
        config.policy.context_order,
        config.task.horizon,
    )?;
    base.initialize(&config.policy.init, &mut master.substream(INIT))?;
    Ok(PolicyPair::new(base, config.perturbation, config.realization))
}

fn enumerable(config: &ExperimentConfig) -> bool {
    check_cap(config.policy.vocab, config.task.horizon).is_ok()
        && (0..config.task.horizon)
            .try_fold(config.task.prompts, |n: usize, _| n.checked_mul(config.policy.vocab))
            .is_some_and(|n| n <= config.grad_error_cap)
}

/// Run the training loop. `workers` threads generate rollout groups; output is
/// identical for any worker count because each group has its own substream.
pub fn run(config: &ExperimentConfig, workers: usize) -> Result<TrainOutcome> {
    config.validate()?;
    let pool = pool(workers)?;
    let master = RngStream::new(config.seed, 0);
    let mut pair = initial_pair(config)?;
    let rho = config.effective_rho();
    let sampler = config.sampler();
    let exact_grads = enumerable(config);
    let mut rows = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let started = config.timing.then(Instant::now);
        pair.realize(&mut master.substream_path(&[NOISE, it as u64]));
        let j = dp::objective(&pair, &config.task, View::Train)?;
        let j_mp = dp::objective(&pair, &config.task, View::TrainMp { rho })?;

        let iter_rng = master.substream_path(&[ROLLOUT, it as u64]);
        let groups: Vec<Vec<Trajectory>> = pool.install(|| {
            (0..config.groups as u64)
                .into_par_iter()
                .map(|g| rollout_group(&pair, &config.task, sampler, rho, &iter_rng, g, config.estimator.group_size))
                .collect::<std::result::Result<_, _>>()
        })?;
        let batch: Vec<Trajectory> = groups.into_iter().flatten().collect();
        let est = estimators::estimate(&config.estimator, &batch, &pair, config.seed)?;

        let grad_error = if exact_grads {
            let view = match config.estimator.kind {
                EstimatorKind::Dvp { rho } => View::TrainMp { rho },
                _ => View::Train,
            };
            let exact = dp::gradient(&pair, &config.task, view)?;
            finite(est.vector.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        } else {
            None
        };
        let n = batch.len() as f64;
        let mut row = MetricsRow {
            iteration: it,
            status: STATUS_OK.into(),
            j,
            j_mp,
            ppl_gap: finite(metrics::ppl_gap(&batch)?),
            mean_delta_y: finite(batch.iter().map(|t| t.delta_y).sum::<f64>() / n),
            mean_abs_delta_y: finite(est.diagnostics.mean_abs_delta),
            max_is_ratio: finite(est.diagnostics.max_is_ratio),
            grad_error,
            zero_weight_fraction: est.diagnostics.zero_weight_fraction,
            wall_ms: None,
        };

        let mut abort = None;
        if !est.is_finite() {
            abort = Some("non-finite gradient estimate".to_string());
        } else {
            for (t, g) in pair.base.theta_mut().iter_mut().zip(&est.vector) {
                *t += config.lr * g;
            }
            if !pair.base.is_finite() {
                abort = Some("non-finite policy parameter".to_string());
            } else if pair.base.theta().iter().any(|t| t.abs() > MAX_LOGIT) {
                abort = Some(format!("policy logit beyond {MAX_LOGIT:e}"));
            }
        }
        row.wall_ms = started.map(|s| s.elapsed().as_secs_f64() * 1e3);
        if let Some(reason) = abort {
            row.status = STATUS_ABORT.into();
            rows.push(row);
            return Ok(TrainOutcome {
                rows,
                policy: pair.base,
                abort: Some(HarnessError::NumericAbort { iteration: it, reason }),
            });
        }
        rows.push(row);
    }
    Ok(TrainOutcome { rows, policy: pair.base, abort: None })
}

#[derive(Serialize)]
struct CheckpointRow<'a> {
    prompt: usize,
    context: &'a [usize],
    logits: &'a [f64],
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    vocab: usize,
    prompts: usize,
    context_order: usize,
    rows: Vec<CheckpointRow<'a>>,
}

/// Final logit table as JSON, one entry per context row.
pub fn write_checkpoint(path: &Path, policy: &TabularPolicy) -> Result<()> {
    let rows = (0..policy.rows())
        .map(|r| {
            let (prompt, context) = policy.context_key(r);
            CheckpointRow { prompt, context, logits: policy.row(r) }
        })
        .collect();
    let ck = Checkpoint { vocab: policy.vocab(), prompts: policy.prompts(), context_order: policy.context_order(), rows };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

/// `<metrics path>.policy.json`.
pub fn checkpoint_path(metrics_path: &Path) -> std::path::PathBuf {
    let mut s = metrics_path.as_os_str().to_owned();
    s.push(".policy.json");
    s.into()
}
