//! `fertsae`: simulation, direct estimation, model fitting, urban/rural
//! aggregation and cross-validation from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fertsae_core::CoreError;
use fertsae_models::ModelError;
use fertsae_validation::ValidationError;

use config::{FileConfig, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("sampler failed: {0}")]
    Convergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Convergence(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if e.is_convergence() {
            CliError::Convergence(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        match e {
            ValidationError::Model(m) => m.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fertsae", version, about = "Subnational fertility estimation from birth histories")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// national, admin1 or admin2.
    #[arg(long, global = true)]
    level: Option<String>,
    /// Calendar window, e.g. 2012-2020.
    #[arg(long, global = true)]
    window: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Survey data directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic survey with known truth.
    Simulate,
    /// Design-based ASFR/TFR with jackknife variances.
    Direct,
    /// Area-level space × age model for log ASFR.
    FitAreaAsfr,
    /// Area-level space × time model for log TFR.
    FitAreaTfr,
    /// Unit-level negative binomial model, optionally urban/rural stratified.
    FitUnit,
    /// Smooth covariate proportions with an area-level logit model.
    FitCovariates,
    /// Combine urban and rural draws with urban fractions.
    AggregateUr,
    /// Leave-one-combination-out cross-validation.
    Cv,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let rc = RunConfig::resolve(
        file,
        Overrides {
            seed: cli.seed,
            level: cli.level,
            window: cli.window,
            out: cli.out,
            data: cli.data,
        },
    )?;
    match cli.command {
        Command::Simulate => commands::simulate(&rc),
        Command::Direct => commands::direct(&rc),
        Command::FitAreaAsfr => commands::fit_area_asfr(&rc),
        Command::FitAreaTfr => commands::fit_area_tfr(&rc),
        Command::FitUnit => commands::fit_unit(&rc),
        Command::FitCovariates => commands::fit_covariates(&rc),
        Command::AggregateUr => commands::aggregate(&rc),
        Command::Cv => commands::cv(&rc),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
