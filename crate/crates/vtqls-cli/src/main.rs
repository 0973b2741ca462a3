//! `vtqls`: experiment harness for the linear-system simulator.
//!
//! Exit status: 0 on success, 2 when a checked bound or guarantee fails,
//! 3 on configuration errors, 1 otherwise.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use vtqls::dinv::DinvError;
use vtqls::precond::PrecondError;
use vtqls::vtaa::VtaaError;

use crate::commands::Context;
use crate::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("instance generation failed: {0}")]
    Generation(String),
    #[error("bound failure: {0}")]
    Bound(String),
    #[error(transparent)]
    Dinv(#[from] DinvError),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error(transparent)]
    Vtaa(#[from] VtaaError),
    #[error(transparent)]
    Encoding(#[from] vtqls::encodings::EncodingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Bound(_) | CliError::Dinv(DinvError::ScheduleViolation { .. }) => 2,
            CliError::Precond(PrecondError::PreconditionFailure(_)) => 2,
            CliError::Config(_) | CliError::Generation(_) => 3,
            CliError::Dinv(DinvError::Parameter(_)) => 3,
            CliError::Precond(PrecondError::Parameter(_) | PrecondError::InvalidPreconditioner { .. }) => 3,
            CliError::Precond(PrecondError::Resource { .. })
            | CliError::Dinv(DinvError::Vtaa(VtaaError::Resource { .. } | VtaaError::Parameter(_)))
            | CliError::Vtaa(VtaaError::Resource { .. } | VtaaError::Parameter(_)) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Matrix,
    Analytic,
    Spectral,
}

#[derive(Debug, Parser)]
#[command(name = "vtqls", version, about = "Linear-system solver experiments with instrumented query counts")]
struct Cli {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`, or `$VTQLS_OUT`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel suites and sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write the configured instance as JSON.
    Generate,
    /// Discretized-inverse solver with the deterministic schedule.
    Solve,
    /// Solver preconditioned by the right-hand side itself.
    SolvePrecond,
    /// Solution-norm estimation by increasing the pre-merging depth.
    EstimateNorm,
    /// All inequality suites.
    Bounds,
    /// ODE, eigenvalue and ground-state pipelines.
    Apps,
    /// The search lower-bound instance.
    GroverLb,
    /// Query-count comparison over a (κ, p, ε) grid.
    CompareCosts,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Solve => "solve",
            Command::SolvePrecond => "solve-precond",
            Command::EstimateNorm => "estimate-norm",
            Command::Bounds => "bounds",
            Command::Apps => "apps",
            Command::GroverLb => "grover-lb",
            Command::CompareCosts => "compare-costs",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.command = Some(cli.command.name().to_string());
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let out = cli
        .out
        .or_else(|| std::env::var_os("VTQLS_OUT").map(PathBuf::from))
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.validate()?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let ctx = Context { cfg, out, backend: cli.backend };
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Solve => commands::solve(&ctx),
        Command::SolvePrecond => commands::solve_precond(&ctx),
        Command::EstimateNorm => commands::estimate_norm(&ctx),
        Command::Bounds => commands::bounds(&ctx),
        Command::Apps => commands::apps(&ctx),
        Command::GroverLb => commands::grover_lb(&ctx),
        Command::CompareCosts => commands::compare_costs(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
