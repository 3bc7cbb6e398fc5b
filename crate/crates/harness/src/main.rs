use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use dvp_harness::config::ExperimentConfig;
use dvp_harness::sweep::SweepConfig;
use dvp_harness::verify::VerifySettings;
use dvp_harness::{metrics, report, sweep, train, verify, HarnessError, Result, EXIT_OK};

#[derive(Parser)]
#[command(name = "dvp", version, about = "Training-inference mismatch experiments on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<String>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run every numerical verification suite.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train one configuration and write per-iteration metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from a named preset (parity, collapse, collapse_dvp).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Run a grid of training configurations in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize metrics files or directories of them.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::Io { path: p.display().to_string(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_verify(common: Common, inject_fault: bool) -> Result<()> {
    let mut settings = match &common.config {
        Some(p) => VerifySettings::load(p)?,
        None => VerifySettings::default(),
    };
    if let Some(s) = common.seed {
        settings.seed = s;
    }
    settings.inject_fault |= inject_fault;
    let report = verify::run(&settings)?;
    let text = report.to_text();
    write_or_print(common.out.as_deref(), &text)?;
    if common.out.is_some() {
        eprint!("{text}");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(HarnessError::VerifyFailed(format!("{} check(s) failed", report.checks.iter().filter(|c| !c.passed).count())))
    }
}

fn run_train(common: Common, preset: Option<String>) -> Result<()> {
    let mut value = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Io { path: p.clone(), source: e })?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?
        }
        None => Value::Object(Default::default()),
    };
    let obj = value.as_object_mut().ok_or_else(|| HarnessError::Config("config must be a JSON object".into()))?;
    if let Some(p) = preset {
        obj.entry("preset").or_insert(Value::String(p));
    }
    if let Some(s) = common.seed {
        obj.insert("seed".into(), s.into());
    }
    let config = ExperimentConfig::from_value(value)?;
    eprintln!("{}", config.to_json_pretty());
    let out = common
        .out
        .or_else(|| config.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", config.name)));
    let format = metrics::format_for_path(&out, config.format);
    let outcome = train::run(&config, common.workers)?;
    metrics::write_file(&out, &outcome.rows, format)?;
    train::write_checkpoint(&train::checkpoint_path(&out), &outcome.policy)?;
    match outcome.abort {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn run_sweep(common: Common) -> Result<()> {
    let path = common.config.ok_or_else(|| HarnessError::Config("sweep needs --config".into()))?;
    let sweep_cfg = SweepConfig::load(&path)?;
    let points = sweep_cfg.points(common.seed)?;
    let out = common.out.unwrap_or_else(|| PathBuf::from("sweep"));
    eprintln!("{} points -> {}", points.len(), out.display());
    let summaries = sweep::run(&points, &out, common.workers)?;
    report::write_summaries(std::io::stdout().lock(), &summaries)
}

fn run_report(inputs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    if inputs.is_empty() {
        return Err(HarnessError::Config("report needs at least one metrics file or directory".into()));
    }
    let summaries = report::summarize_files(&report::collect_files(&inputs)?)?;
    let mut buf = Vec::new();
    report::write_summaries(&mut buf, &summaries)?;
    write_or_print(out.as_deref(), &String::from_utf8_lossy(&buf))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { common, inject_fault } => run_verify(common, inject_fault),
        Command::Train { common, preset } => run_train(common, preset),
        Command::Sweep { common } => run_sweep(common),
        Command::Report { inputs, out } => run_report(inputs, out),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
