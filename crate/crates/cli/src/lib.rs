//! Command-line orchestration of the rehabilitation pipeline.

pub mod commands;
pub mod config;
pub mod io;
pub mod selftest;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key {key}: {message}")]
    Config { key: String, message: String },
    #[error("missing required flag --{0}")]
    MissingFlag(&'static str),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
    #[error("{0} self-test check(s) failed")]
    SelfTest(usize),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }

    /// 2 for invalid invocations or configuration, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::MissingFlag(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vsr",
    version,
    about = "Rehabilitate ruptured curvilinear structures in binary masks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of clean/ruptured masks and images.
    Synth(CommonArgs),
    /// Train the edge classifier on a synthetic dataset.
    TrainGerm(CommonArgs),
    /// Train the learned merger on a synthetic dataset.
    TrainCmm(CommonArgs),
    /// Rehabilitate a mask, or every ruptured mask of a dataset directory.
    Rehab(CommonArgs),
    /// Score predictions against ground truth as a TSV table.
    Eval(CommonArgs),
    /// Run the built-in oracle checks.
    Selftest(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Input mask or dataset directory.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Ground-truth mask or dataset directory.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Predicted mask or directory of rehabilitated masks.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Probability map of the prediction (file mode of `eval`).
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Grayscale image matching `--in` (file mode of `rehab`).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Edge classifier checkpoint.
    #[arg(long)]
    pub germ: Option<PathBuf>,
    /// Learned merger checkpoint.
    #[arg(long)]
    pub cmm: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub threads: Option<String>,
    /// geometric or learned.
    #[arg(long)]
    pub merger: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long = "gcn-layers")]
    pub gcn_layers: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    /// Training epochs of the subcommand's model.
    #[arg(long)]
    pub epochs: Option<String>,
    /// Learning rate of the subcommand's model.
    #[arg(long)]
    pub lr: Option<String>,
    /// Batch size of the subcommand's model.
    #[arg(long)]
    pub batch: Option<String>,
    /// Number of synthetic samples.
    #[arg(long)]
    pub samples: Option<String>,
}

/// Parses `argv` (program name first) and runs it; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
