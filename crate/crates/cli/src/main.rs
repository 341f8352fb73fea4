//! `lrsa`: data generation, training, evaluation, kernel analysis,
//! gradient checking and FLOP benchmarks for low-rank spatial attention
//! operators.
//!
//! Machine-readable results go to stdout as JSON, human summaries to
//! stderr. Every invocation leaves a run manifest behind.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::manifest::RunRecord;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] lrsa_core::Error),
}

impl CliError {
    /// 2 usage, 3 data or contract, 4 numerical.
    pub fn exit_code(&self) -> u8 {
        use lrsa_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 4,
            CliError::Core(E::Solver(_) | E::Convergence { .. } | E::Training(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lrsa", version, about = "Low-rank spatial attention operator laboratory")]
struct Cli {
    /// Where to write the run manifest (default: inside --out, else ./lrsa_run.json).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic operator dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Singular-value analysis of a Green's kernel or an induced model kernel.
    AnalyzeKernel(AnalyzeArgs),
    /// Compare tape gradients with central differences on a random model.
    Gradcheck(GradcheckArgs),
    /// Analytic and measured FLOPs per block over a grid of point counts.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// `green1d` or `model`.
    #[arg(long)]
    pub source: String,
    /// Grid size; taken from --data when given.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose sample feeds the model (default: a random smooth field).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Model configuration (default: depth 2, width 8, 2 heads, M = 4).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points in the random sample.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![512usize, 1024, 2048, 4096])]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("LRSA_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("LRSA_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} worker threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let (name, out_dir) = match &cli.command {
        Command::GenData(a) => ("gen-data", Some(a.out.clone())),
        Command::Train(a) => ("train", Some(a.out.clone())),
        Command::Eval(_) => ("eval", None),
        Command::AnalyzeKernel(a) => ("analyze-kernel", Some(a.out.clone())),
        Command::Gradcheck(_) => ("gradcheck", None),
        Command::Bench(_) => ("bench", None),
    };
    let mut record = RunRecord::new(name);
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &mut record),
        Command::Train(a) => commands::train(a, &mut record),
        Command::Eval(a) => commands::eval(a, &mut record),
        Command::AnalyzeKernel(a) => commands::analyze_kernel(a, &mut record),
        Command::Gradcheck(a) => commands::gradcheck(a, &mut record),
        Command::Bench(a) => commands::bench(a, &mut record),
    });
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    let path = cli.manifest.clone().unwrap_or_else(|| match (&out_dir, record.out_dir_usable) {
        (Some(dir), true) => dir.join(manifest::MANIFEST_FILE),
        _ => PathBuf::from("lrsa_run.json"),
    });
    if let Err(e) = record.finish(start.elapsed(), result.as_ref().err(), code).write(&path) {
        eprintln!("warning: could not write run manifest {}: {e}", path.display());
    }
    ExitCode::from(code)
}
