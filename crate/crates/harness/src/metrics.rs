//! Per-iteration metrics and their CSV / JSONL encodings.
//!
//! Column order (both formats): `iteration, status, j, j_mp, ppl_gap,
//! mean_delta_y, mean_abs_delta_y, max_is_ratio, grad_error,
//! zero_weight_fraction, wall_ms`. Missing values are empty CSV fields and
//! JSON `null`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use dvp_core::generation::Trajectory;

use crate::config::MetricsFormat;
use crate::{HarnessError, Result};

pub const STATUS_OK: &str = "ok";
pub const STATUS_ABORT: &str = "numeric_abort";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub status: String,
    /// Exact `J` of the current policy.
    pub j: f64,
    /// Exact `J_mp` of the current policy.
    pub j_mp: f64,
    pub ppl_gap: Option<f64>,
    pub mean_delta_y: Option<f64>,
    pub mean_abs_delta_y: Option<f64>,
    pub max_is_ratio: Option<f64>,
    /// `||estimate - exact||_2`, when the task is small enough to enumerate.
    pub grad_error: Option<f64>,
    pub zero_weight_fraction: f64,
    pub wall_ms: Option<f64>,
}

/// `Some(x)` for finite `x`.
pub fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Per-token geometric-mean ratio `exp(mean_t (logp_infer_t - logp_train_t))`.
pub fn ppl_gap(batch: &[Trajectory]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in batch {
        for s in &t.steps {
            sum += s.logp_infer - s.logp_train;
            n += 1;
        }
    }
    if n == 0 {
        return Err(HarnessError::Config("ppl_gap of an empty batch".into()));
    }
    Ok((sum / n as f64).exp())
}

pub fn format_for_path(path: &Path, default: MetricsFormat) -> MetricsFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => MetricsFormat::Jsonl,
        Some("csv") => MetricsFormat::Csv,
        _ => default,
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricsRow], format: MetricsFormat) -> Result<()> {
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(HEADER)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| HarnessError::io("<metrics>", e))?;
        }
        MetricsFormat::Jsonl => {
            let mut out = out;
            for r in rows {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n").map_err(|e| HarnessError::io("<metrics>", e))?;
            }
        }
    }
    Ok(())
}

pub const HEADER: [&str; 11] = [
    "iteration",
    "status",
    "j",
    "j_mp",
    "ppl_gap",
    "mean_delta_y",
    "mean_abs_delta_y",
    "max_is_ratio",
    "grad_error",
    "zero_weight_fraction",
    "wall_ms",
];

pub fn write_file(path: &Path, rows: &[MetricsRow], format: MetricsFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_rows(&mut w, rows, format)?;
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_rows<R: BufRead>(input: R, format: MetricsFormat) -> Result<Vec<MetricsRow>> {
    match format {
        MetricsFormat::Csv => {
            let mut r = csv::Reader::from_reader(input);
            r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
        }
        MetricsFormat::Jsonl => input
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .map(|l| {
                let l = l.map_err(|e| HarnessError::io("<metrics>", e))?;
                Ok(serde_json::from_str(&l)?)
            })
            .collect(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_rows(std::io::BufReader::new(f), format_for_path(path, MetricsFormat::Csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize) -> MetricsRow {
        MetricsRow {
            iteration: i,
            status: STATUS_OK.into(),
            j: 0.25 + i as f64 * 0.1,
            j_mp: 0.3,
            ppl_gap: Some(1.0000123),
            mean_delta_y: Some(-0.01),
            mean_abs_delta_y: Some(0.02),
            max_is_ratio: Some(3.5e7),
            grad_error: if i.is_multiple_of(2) { None } else { Some(1e-3) },
            zero_weight_fraction: 0.0,
            wall_ms: None,
        }
    }

    #[test]
    fn empty_run_is_header_only() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[], MetricsFormat::Csv).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), HEADER.join(","));
    }

    #[test]
    fn round_trip_both_formats() {
        let rows: Vec<_> = (0..5).map(row).collect();
        for fmt in [MetricsFormat::Csv, MetricsFormat::Jsonl] {
            let mut buf = Vec::new();
            write_rows(&mut buf, &rows, fmt).unwrap();
            assert_eq!(read_rows(&buf[..], fmt).unwrap(), rows);
        }
    }

    #[test]
    fn jsonl_lines_are_json() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[row(0), row(1)], MetricsFormat::Jsonl).unwrap();
        for line in String::from_utf8(buf).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.is_object());
        }
    }

    #[test]
    fn csv_header_matches_struct_order() {
        let mut buf = Vec::new();
        let mut w = csv::Writer::from_writer(&mut buf);
        w.serialize(row(1)).unwrap();
        drop(w);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    }

    #[test]
    fn extension_picks_format() {
        assert_eq!(format_for_path(Path::new("a/b.jsonl"), MetricsFormat::Csv), MetricsFormat::Jsonl);
        assert_eq!(format_for_path(Path::new("a/b"), MetricsFormat::Jsonl), MetricsFormat::Jsonl);
    }
}
