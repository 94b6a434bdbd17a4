//! Command-line driver for the multi-stage architecture search pipeline.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 internal invariant violation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use msnas::dyninfer::CostKind;
use msnas::error::ErrorKind;

#[derive(Parser)]
#[command(name = "msnas", version, about = "Search for multi-stage early-exit CNN architectures")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CostKindArg {
    Macs,
    Latency,
}

impl From<CostKindArg> for CostKind {
    fn from(v: CostKindArg) -> Self {
        match v {
            CostKindArg::Macs => CostKind::Macs,
            CostKindArg::Latency => CostKind::Latency,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the once-for-all supernet and write a checkpoint.
    TrainSupernet {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the confidence-and-correctness database from a checkpoint.
    BuildDb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_arch: Option<usize>,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        latency_table: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit the metric predictor, run evolutionary search, re-score the winner.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        cost_target: Option<f64>,
        #[arg(long, value_enum)]
        cost_kind: Option<CostKindArg>,
        #[arg(long)]
        latency_table: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Base name for the report and history files.
        #[arg(long, default_value = "search_report")]
        report_name: String,
    },
    /// Evaluate an architecture with true dynamic inference on the test split.
    EvalArch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated values for stages 1..S-1.
        #[arg(long)]
        thresholds: Option<String>,
        /// Take thresholds from a search report.
        #[arg(long)]
        from_report: Option<PathBuf>,
        /// Never exit early (static final-stage network).
        #[arg(long)]
        sentinel: bool,
        /// Also emit a (cost, accuracy) threshold-sweep CSV.
        #[arg(long)]
        sweep: bool,
    },
    /// Measure per-op latency for every signature in the search space.
    BenchLatency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        device: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmups: usize,
    },
    /// Extract the architecture document from a search report.
    ExportArch {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_file: PathBuf,
    },
}

fn run(cli: Cli) -> msnas::Result<()> {
    match cli.cmd {
        Cmd::TrainSupernet { config, out } => commands::cmd_train_supernet(&config, &out),
        Cmd::BuildDb { config, out, num_arch, num_images, latency_table, checkpoint } => {
            commands::cmd_build_db(&config, &out, num_arch, num_images, &latency_table, &checkpoint)
        }
        Cmd::Search {
            config,
            out,
            omega,
            cost_target,
            cost_kind,
            latency_table,
            checkpoint,
            report_name,
        } => commands::cmd_search(
            &config,
            &out,
            omega,
            cost_target,
            cost_kind.map(Into::into),
            &latency_table,
            &checkpoint,
            &report_name,
        ),
        Cmd::EvalArch {
            config,
            out,
            arch,
            report,
            checkpoint,
            thresholds,
            from_report,
            sentinel,
            sweep,
        } => {
            let source = if sentinel {
                commands::ThresholdSource::Sentinel
            } else if let Some(p) = from_report {
                commands::ThresholdSource::FromReport(p)
            } else if let Some(list) = thresholds {
                let vals: std::result::Result<Vec<f64>, _> =
                    list.split(',').map(|v| v.trim().parse::<f64>()).collect();
                commands::ThresholdSource::Explicit(vals.map_err(|e| {
                    msnas::Error::Config(format!("bad threshold list: {e}"))
                })?)
            } else {
                return Err(msnas::Error::Config(
                    "need --thresholds, --from-report, or --sentinel".into(),
                ));
            };
            commands::cmd_eval_arch(&config, &out, &arch, &report, &checkpoint, source, sweep)
        }
        Cmd::BenchLatency { config, out, device, repeats, warmups } => {
            commands::cmd_bench_latency(&config, &out, &device, repeats, warmups)
        }
        Cmd::ExportArch { report, out_file } => commands::cmd_export_arch(&report, &out_file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Config => ExitCode::from(2),
                ErrorKind::Data => ExitCode::from(3),
                ErrorKind::Internal => ExitCode::from(4),
            }
        }
    }
}
