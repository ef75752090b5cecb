//! `lddm`: generate training data, train the local operator, evaluate it,
//! run Schwarz solves and export figure data.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{InitialArg, ModeArg, SolverKind, TargetArg, TolKind};

#[derive(Debug, Parser)]
#[command(name = "lddm", version, about = "Learned domain decomposition for heterogeneous diffusion")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve sampled local problems and write a DSN1 dataset.
    Generate(GenerateArgs),
    /// Train the operator on a dataset and write PPN1 checkpoints.
    Train(TrainArgs),
    /// Relative L2 errors of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Schwarz iteration on a composite domain.
    Solve(SolveArgs),
    /// Graymaps and CSV tables from fields, histories and OOD sweeps.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    /// Grains (or fibers) per sample.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub cells: Option<u64>,
    /// Nodes per side.
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    /// Channel widths per stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub kernel_nodes: Option<usize>,
    /// Start from an existing checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "u")]
    pub target: TargetArg,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// square | rectangle | l | i, or a `#`/`.` mask with rows separated by `/`.
    #[arg(long)]
    pub shape: Option<String>,
    /// Tile layout `RxC`.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long, value_enum)]
    pub solver: Option<SolverKind>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub tol_kind: Option<TolKind>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub initial: Option<InitialArg>,
    /// Voronoi grains per unit area.
    #[arg(long)]
    pub cells_per_window: Option<f64>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub local_nodes: Option<usize>,
    /// TOML file with fixed boundary parameters.
    #[arg(long)]
    pub boundary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// GFN1 or CFN1 files to render.
    #[arg(long)]
    pub field: Vec<PathBuf>,
    /// Schwarz history CSV to convert into an error-vs-iteration table.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Checkpoint for an out-of-distribution grain-count sweep.
    #[arg(long)]
    pub ood_ckpt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,50,100")]
    pub ood_cells: Vec<usize>,
    /// Samples per grain count.
    #[arg(long, default_value_t = 20)]
    pub ood_n: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<lddm_core::Error> for CliError {
    fn from(e: lddm_core::Error) -> Self {
        use lddm_core::Error as E;
        let mut root = &e;
        while let E::LocalSolve { source, .. } | E::Sample { source, .. } = root {
            root = source;
        }
        match root {
            E::NonConvergence { .. } | E::ValidationFailure { .. } | E::NonFiniteLoss { .. } | E::DegenerateReference | E::PackingFailure { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lddm: {e}");
            ExitCode::from(e.code())
        }
    }
}
