//! `rtn` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
//! failure. Failures print one `error: kind=... code=... reason="..."` line
//! on stderr.

mod commands;
mod visual;

pub use commands::{load_eval_set, run};

use clap::{Args, Parser, Subcommand};
use rtn_core::checkpoint::CheckpointError;
use rtn_core::config::ConfigError;
use rtn_core::data::DataError;
use rtn_core::eval::EvalError;
use rtn_core::tensor::TensorError;
use rtn_core::train::TrainError;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "rtn", version, about = "Recurrent transformer networks for dense correspondence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic pairs and write checkpoints and the loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a pair directory or on synthetic pairs.
    Eval(EvalArgs),
    /// Estimate a flow and write warped images.
    Warp(WarpArgs),
    /// Write synthetic pairs with ground truth to disk.
    Gen(GenArgs),
    /// Finite-difference check of every op and the full loss.
    Gradcheck(GradcheckArgs),
    /// Train one model per window size and score each iteration count.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config step count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print a loss line every N steps (0 disables).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["set", "synthetic"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of pair subdirectories (as written by `rtn gen`).
    #[arg(long)]
    pub set: Option<PathBuf>,
    /// Number of held-out synthetic pairs to generate.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Canvas size of synthetic pairs; defaults to the checkpoint's held-out size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Canvas size; defaults to the config's held-out size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Seed of the first pair; defaults to the held-out seed base.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Random entries checked per parameter tensor in the full-loss check.
    #[arg(long, default_value_t = 3)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Iteration counts to score.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub iterations: Vec<usize>,
    /// Odd window side lengths.
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    pub windows: Vec<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub reason: String,
}

impl CliError {
    pub fn usage(reason: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, reason: reason.into() }
    }

    pub fn data(reason: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, reason: reason.into() }
    }

    pub fn numerical(reason: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Numerical, reason: reason.into() }
    }

    /// The single diagnostic line.
    pub fn line(&self) -> String {
        let reason = self.reason.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error: kind={} code={} reason=\"{reason}\"", self.kind.name(), self.kind.code())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::numerical(e.to_string()),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).line());
            return ErrorKind::Usage.code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.code()
        }
    }
}
