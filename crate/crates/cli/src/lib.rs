//! Command-line front end: synthetic data, training, prediction, evaluation,
//! trading and manifest verification, all driven by one JSON config.

use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

use commands::RunContext;

/// A user-correctable problem: bad config, failed chronology check,
/// misaligned or malformed forecasts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Success,
    EarlyStop,
    NumericAbort,
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::EarlyStop => 3,
            Outcome::NumericAbort => 4,
        }
    }
}

/// Exit status for a failed command.
pub fn error_exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<brierlab::Error>() {
            return match e {
                brierlab::Error::Io(_) => EXIT_FAILURE,
                brierlab::Error::Numeric(_) => Outcome::NumericAbort.exit_code(),
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_FAILURE
}

#[derive(Debug, Parser)]
#[command(
    name = "brierlab",
    version,
    about = "Train and evaluate probabilistic forecasters with Brier-score rewards"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the global seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic question stream, its split and the oracle sidecar
    Synth(CommonArgs),
    /// Train one checkpoint per ensemble member
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of seeds to train (overrides ensemble_size)
        #[arg(long)]
        members: Option<usize>,
    },
    /// Write per-member and ensemble forecasts for the test split
    Predict(CommonArgs),
    /// Score forecast files and compare them pairwise
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Forecast files (default: every file in the forecast directory)
        forecasts: Vec<PathBuf>,
    },
    /// Simulate one-share trades under the three gating rules
    Trade {
        #[command(flatten)]
        common: CommonArgs,
        /// Forecast files (default: every file in the forecast directory)
        forecasts: Vec<PathBuf>,
    },
    /// Verify the manifest against the output directory
    Report(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Synth(c) | Command::Predict(c) | Command::Report(c) => c,
            Command::Train { common, .. } | Command::Evaluate { common, .. } | Command::Trade { common, .. } => common,
        }
    }
}

fn context(common: &CommonArgs, members: Option<usize>) -> Result<RunContext> {
    let loaded = config::load(&common.config)?;
    let mut cfg = loaded.config;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(k) = members {
        cfg.ensemble_size = k;
    }
    cfg.validate()?;
    Ok(RunContext {
        effective_sha256: config::effective_hash(&cfg)?,
        source_sha256: loaded.source_sha256,
        config: cfg,
    })
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let common = cli.command.common();
    if let Some(jobs) = common.jobs {
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    let members = match &cli.command {
        Command::Train { members, .. } => *members,
        _ => None,
    };
    let ctx = context(common, members)?;
    match &cli.command {
        Command::Synth(_) => commands::cmd_synth(&ctx),
        Command::Train { .. } => commands::cmd_train(&ctx),
        Command::Predict(_) => commands::cmd_predict(&ctx),
        Command::Evaluate { forecasts, .. } => commands::cmd_evaluate(&ctx, forecasts),
        Command::Trade { forecasts, .. } => commands::cmd_trade(&ctx, forecasts),
        Command::Report(_) => commands::cmd_report(&ctx),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}
