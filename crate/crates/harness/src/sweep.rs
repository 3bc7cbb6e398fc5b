//! Grid runs over `rho`, clip constant, perturbation scale and seed.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dvp_core::estimators::EstimatorKind;
use dvp_core::perturbation::PerturbationModel;

use crate::config::{ExperimentConfig, MetricsFormat};
use crate::report::{summarize, RunSummary};
use crate::{metrics, pool, train, HarnessError, Result};

/// Sweep file: `{"base": <experiment config>, "rho": [..], "clip": [..],
/// "sigma": [..], "seeds": [..]}`. An empty or missing axis keeps the base
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "empty_object")]
    pub base: Value,
    #[serde(default)]
    pub rho: Vec<f64>,
    #[serde(default)]
    pub clip: Vec<f64>,
    /// Gaussian `sigma`, or `eps_max` for bounded-uniform noise.
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub rho: Option<f64>,
    pub clip: Option<f64>,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl SweepConfig {
    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("invalid sweep config: {e}")))
    }

    /// Cartesian product in `rho, clip, sigma, seed` order (seed fastest).
    pub fn points(&self, default_seed: Option<u64>) -> Result<Vec<SweepPoint>> {
        let base = ExperimentConfig::from_value(self.base.clone())?;
        let axis = |v: &[f64]| if v.is_empty() { vec![None] } else { v.iter().copied().map(Some).collect() };
        let seeds = if self.seeds.is_empty() { vec![default_seed.unwrap_or(base.seed)] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for rho in axis(&self.rho) {
            for clip in axis(&self.clip) {
                for sigma in axis(&self.sigma) {
                    for &seed in &seeds {
                        let mut c = base.clone();
                        c.seed = seed;
                        if let Some(r) = rho {
                            c.rho = r;
                            if let EstimatorKind::Dvp { rho } = &mut c.estimator.kind {
                                *rho = r;
                            }
                        }
                        if let Some(x) = clip {
                            match &mut c.estimator.kind {
                                EstimatorKind::Tis { clip } | EstimatorKind::Mis { clip } => *clip = x,
                                _ => {}
                            }
                        }
                        if let Some(s) = sigma {
                            c.perturbation = match c.perturbation {
                                PerturbationModel::Gaussian { .. } => PerturbationModel::Gaussian { sigma: s },
                                PerturbationModel::BoundedUniform { .. } => PerturbationModel::BoundedUniform { eps_max: s },
                            };
                        }
                        c.validate()?;
                        out.push(SweepPoint { index: out.len(), rho, clip, sigma, seed, config: c });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    point: usize,
    seed: u64,
    rho: Option<f64>,
    clip: Option<f64>,
    sigma: Option<f64>,
    run: &'a str,
    iterations: usize,
    aborted: bool,
    final_j: Option<f64>,
    final_j_mp: Option<f64>,
    max_is_ratio: f64,
    median_ppl_gap: Option<f64>,
    spearman_j_mp: Option<f64>,
}

/// Run every point (in parallel, one thread per point) and write
/// `point_NNNN.<ext>` metrics plus `summary.csv` into `out_dir`.
pub fn run(points: &[SweepPoint], out_dir: &Path, workers: usize) -> Result<Vec<RunSummary>> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let summaries: Vec<RunSummary> = pool(workers)?.install(|| {
        points
            .par_iter()
            .map(|p| {
                let out = train::run(&p.config, 1)?;
                let ext = match p.config.format {
                    MetricsFormat::Csv => "csv",
                    MetricsFormat::Jsonl => "jsonl",
                };
                let name = format!("point_{:04}.{ext}", p.index);
                metrics::write_file(&out_dir.join(&name), &out.rows, p.config.format)?;
                Ok(summarize(name, &out.rows))
            })
            .collect::<Result<_>>()
    })?;
    let path = out_dir.join("summary.csv");
    let f = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for (p, s) in points.iter().zip(&summaries) {
        w.serialize(SummaryRow {
            point: p.index,
            seed: p.seed,
            rho: p.rho,
            clip: p.clip,
            sigma: p.sigma,
            run: &s.run,
            iterations: s.iterations,
            aborted: s.aborted,
            final_j: s.final_j,
            final_j_mp: s.final_j_mp,
            max_is_ratio: s.max_is_ratio,
            median_ppl_gap: s.median_ppl_gap,
            spearman_j_mp: s.spearman_j_mp,
        })?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(summaries)
}
