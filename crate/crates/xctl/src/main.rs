//! `xctl`: run behaviour cloning, online training and reports from JSON
//! configs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tcpo_core::trainer::{Method, TrainerError};
use tcpo_core::Exec;

#[derive(Debug, Parser)]
#[command(name = "xctl", version, about = "Desk-scale preference-optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Behaviour cloning on the scripted expert; writes `sft.ckpt`.
    Sft {
        config: PathBuf,
        /// Run every data-parallel loop on the calling thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Online training for every configured seed (or just `--seed`).
    Train {
        config: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from this checkpoint instead of running behaviour cloning.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Aggregate metrics from finished training runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportKind::Curves)]
        kind: ReportKind,
        /// Success-rate thresholds for `--kind efficiency`.
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
        thresholds: Vec<f64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportKind {
    Curves,
    Kappa,
    Efficiency,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_name(s).ok_or_else(|| {
        let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method `{s}` (expected one of {})", known.join(", "))
    })
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<TrainerError> for Failure {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Config(_) | TrainerError::Schema(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sft { config, sequential } => run::cmd_sft(&config, exec(sequential)),
        Command::Train { config, method, kappa, seed, checkpoint, sequential } => {
            let overrides = run::Overrides { method, kappa, seed };
            run::cmd_train(&config, &overrides, checkpoint.as_deref(), exec(sequential))
        }
        Command::Report { run_dirs, kind, thresholds, out } => report::cmd_report(&run_dirs, kind, &thresholds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("xctl: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("xctl: {msg}");
            ExitCode::from(1)
        }
    }
}
