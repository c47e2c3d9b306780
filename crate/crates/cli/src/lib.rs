//! Command-line front end for driftbench.
//!
//! Exit codes: 0 on success, 2 for configuration or validation errors, 3 for
//! runtime failures.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{ConfigError, RunConfig};
pub use report::RunReport;

#[derive(Debug, Parser)]
#[command(
    name = "driftbench",
    version,
    about = "Continual-learning benchmark for time-series classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed (and DRIFTBENCH_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long)]
    pub force: bool,
    /// Validate the configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Worker threads for grid points.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset pair.
    Synth {
        /// TOML generator spec; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Train one configuration over the scenario's tasks.
    Run(RunArgs),
    /// Two-stage grid search; writes the winner and a leaderboard.
    Search(RunArgs),
    /// Joint-training reference scores.
    Joint(RunArgs),
    /// Summarize run directories sharing a scenario.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            out,
            force,
            dry_run,
        } => commands::cmd_synth(config.as_deref(), seed, &out, force, dry_run).map(|_| ()),
        Command::Run(a) => commands::cmd_run(&a).map(|_| ()),
        Command::Search(a) => commands::cmd_search(&a).map(|_| ()),
        Command::Joint(a) => commands::cmd_joint(&a).map(|_| ()),
        Command::Report { dirs, format, out } => {
            let table = commands::cmd_report(&dirs, format)?;
            match out {
                Some(p) => std::fs::write(&p, table)?,
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<driftbench::Error>() {
        Some(driftbench::Error::Config(_)) | Some(driftbench::Error::Unknown { .. }) => 2,
        _ => 3,
    }
}
