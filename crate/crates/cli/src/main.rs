//! `cedecomp`: decompose, fit, report, synthesize and validate prediction-record corpora.
//!
//! Exit codes: 0 success, 1 parse/IO/usage error, 2 validation failure,
//! 3 decomposition identity breach.

mod commands;
mod config;
mod error;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use cedecomp::profiles::BinScheme;
use cedecomp::scaling::{GroupBy, DEFAULT_EPSILON};
use clap::{Parser, Subcommand};

use crate::commands::{FitOptions, Global, ReportOptions};
use crate::config::{FileConfig, LogBase};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "cedecomp", version, about = "Cross-entropy decomposition and scaling analysis")]
struct Cli {
    /// Maximum number of input files processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log base for displayed values (computation is always in nats).
    #[arg(long, global = true, value_enum)]
    log_base: Option<LogBase>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// JSON file whose keys mirror the flags; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose each record file into CE, EE, SA and Conf.
    Decompose {
        inputs: Vec<String>,
        /// Replace log-scores below this value (including -inf) with it.
        #[arg(long, allow_hyphen_values = true)]
        clamp_lns: Option<f64>,
    },
    /// Fit power laws of every metric against non-embedding parameters.
    Fit {
        inputs: Vec<String>,
        #[arg(long)]
        group_by: Option<GroupBy>,
        /// Values with magnitude below this are dropped from fits.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Also emit per-model component shares.
        #[arg(long)]
        shares: bool,
        #[arg(long, allow_hyphen_values = true)]
        clamp_lns: Option<f64>,
    },
    /// Write plot-ready CSVs: p/q overlays, checkpoint dynamics, score-by-rank profiles.
    Report {
        inputs: Vec<String>,
        #[arg(long)]
        overlay: bool,
        #[arg(long)]
        dynamics: bool,
        /// Condition on this rank-based error.
        #[arg(long)]
        score_by_rank: Option<u64>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Binning for the binned overlay file.
        #[arg(long)]
        bins: Option<BinScheme>,
        #[arg(long, allow_hyphen_values = true)]
        clamp_lns: Option<f64>,
    },
    /// Generate synthetic corpora from a JSON spec.
    Synth {
        #[arg(long, conflicts_with = "series")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Check record files against the format and invariants.
    Validate { inputs: Vec<String> },
}

fn pick_inputs(cli: Vec<String>, cfg: &FileConfig) -> Vec<String> {
    if cli.is_empty() {
        cfg.inputs.clone()
    } else {
        cli
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let jobs = cli
        .jobs
        .or(cfg.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(CliError::input("--jobs must be at least 1"));
    }
    let global = Global {
        jobs,
        log_base: cli.log_base.or(cfg.log_base).unwrap_or_default(),
        output_dir: cli.output_dir.or_else(|| cfg.output_dir.clone()),
    };

    match cli.command {
        Command::Decompose { inputs, clamp_lns } => {
            commands::cmd_decompose(&global, &pick_inputs(inputs, &cfg), clamp_lns.or(cfg.clamp_lns))
        }
        Command::Fit {
            inputs,
            group_by,
            epsilon,
            shares,
            clamp_lns,
        } => {
            let opts = FitOptions {
                group_by: group_by.or(cfg.group_by).unwrap_or(GroupBy::Family),
                epsilon: epsilon.or(cfg.epsilon).unwrap_or(DEFAULT_EPSILON),
                shares: shares || cfg.shares.unwrap_or(false),
                clamp_lns: clamp_lns.or(cfg.clamp_lns),
            };
            commands::cmd_fit(&global, &pick_inputs(inputs, &cfg), &opts)
        }
        Command::Report {
            inputs,
            overlay,
            dynamics,
            score_by_rank,
            top_k,
            bins,
            clamp_lns,
        } => {
            let opts = ReportOptions {
                overlay: overlay || cfg.overlay.unwrap_or(false),
                dynamics: dynamics || cfg.dynamics.unwrap_or(false),
                score_by_rank: score_by_rank.or(cfg.score_by_rank),
                top_k: top_k.or(cfg.top_k),
                bins: bins.or(cfg.bins).unwrap_or(BinScheme::Log2),
                clamp_lns: clamp_lns.or(cfg.clamp_lns),
            };
            commands::cmd_report(&global, &pick_inputs(inputs, &cfg), &opts)
        }
        Command::Synth { corpus, series } => commands::cmd_synth(&global, corpus.as_deref(), series.as_deref()),
        Command::Validate { inputs } => commands::cmd_validate(&global, &pick_inputs(inputs, &cfg)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
