//! Per-run summaries of metrics files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{self, MetricsRow, STATUS_ABORT};
use crate::stats::{median, spearman};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub iterations: usize,
    pub aborted: bool,
    pub final_j: Option<f64>,
    pub final_j_mp: Option<f64>,
    /// Largest `max_is_ratio` seen; infinite if any row lacks a finite value.
    pub max_is_ratio: f64,
    pub median_ppl_gap: Option<f64>,
    /// Spearman correlation of exact `J_mp` with the iteration index.
    pub spearman_j_mp: Option<f64>,
}

pub fn summarize(run: impl Into<String>, rows: &[MetricsRow]) -> RunSummary {
    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| r.status != STATUS_ABORT).collect();
    let its: Vec<f64> = ok.iter().map(|r| r.iteration as f64).collect();
    let jmp: Vec<f64> = ok.iter().map(|r| r.j_mp).collect();
    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.ppl_gap).collect();
    RunSummary {
        run: run.into(),
        iterations: rows.len(),
        aborted: rows.iter().any(|r| r.status == STATUS_ABORT),
        final_j: ok.last().map(|r| r.j),
        final_j_mp: ok.last().map(|r| r.j_mp),
        max_is_ratio: rows
            .iter()
            .map(|r| if r.status == STATUS_ABORT { f64::INFINITY } else { r.max_is_ratio.unwrap_or(f64::INFINITY) })
            .fold(0.0, f64::max),
        median_ppl_gap: median(&gaps),
        spearman_j_mp: spearman(&its, &jmp),
    }
}

/// Metrics files named directly, or found (non-recursively) in named directories.
pub fn collect_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| HarnessError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| is_metrics_file(f))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn is_metrics_file(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    (name.ends_with(".csv") || name.ends_with(".jsonl")) && name != "summary.csv"
}

pub fn summarize_files(files: &[PathBuf]) -> Result<Vec<RunSummary>> {
    files.iter().map(|f| Ok(summarize(f.display().to_string(), &metrics::read_file(f)?))).collect()
}

pub fn write_summaries<W: std::io::Write>(out: W, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| HarnessError::io("<report>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::STATUS_OK;

    fn row(i: usize, j_mp: f64, ratio: Option<f64>, status: &str) -> MetricsRow {
        MetricsRow {
            iteration: i,
            status: status.into(),
            j: j_mp,
            j_mp,
            ppl_gap: Some(1.0 + i as f64),
            mean_delta_y: None,
            mean_abs_delta_y: None,
            max_is_ratio: ratio,
            grad_error: None,
            zero_weight_fraction: 0.0,
            wall_ms: None,
        }
    }

    #[test]
    fn summary_of_rising_run() {
        let rows: Vec<_> = (0..5).map(|i| row(i, 0.1 * i as f64, Some(2.0 + i as f64), STATUS_OK)).collect();
        let s = summarize("a", &rows);
        assert_eq!(s.iterations, 5);
        assert!(!s.aborted);
        assert_eq!(s.final_j_mp, Some(0.4));
        assert_eq!(s.max_is_ratio, 6.0);
        assert_eq!(s.median_ppl_gap, Some(3.0));
        assert!((s.spearman_j_mp.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn abort_row_counts_as_infinite_ratio() {
        let rows = vec![row(0, 0.1, Some(1.0), STATUS_OK), row(1, 0.2, None, STATUS_ABORT)];
        let s = summarize("b", &rows);
        assert!(s.aborted);
        assert_eq!(s.max_is_ratio, f64::INFINITY);
        assert_eq!(s.final_j_mp, Some(0.1));
    }

    #[test]
    fn csv_has_header() {
        let mut buf = Vec::new();
        write_summaries(&mut buf, &[summarize("x", &[row(0, 0.5, Some(1.0), STATUS_OK)])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("run,iterations,aborted,final_j,"));
    }
}
