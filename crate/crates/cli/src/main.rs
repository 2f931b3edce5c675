//! `regulus`: run scenarios, train and apply the forecaster, audit ledgers.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage or parse failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod forecast;
mod ledger;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or malformed inputs, shape mismatches.
    Usage(String),
    /// The inputs were fine but the work failed or found problems.
    Domain(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Domain(_) => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

pub fn domain(e: impl std::fmt::Display) -> Failure {
    Failure::Domain(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "regulus", version, about = "Ledger-anchored regulation of multi-agent systems")]
pub struct Cli {
    /// Scenario config (JSON). Missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set forecasting.window=6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write its report directory.
    Run,
    /// Train the forecaster on honest trajectories.
    Train {
        /// Trajectory CSV or a scenario report directory.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Separate calibration trajectories (CSV). Without it the later half
        /// of `--data` is held out for calibration.
        #[arg(long, value_name = "PATH")]
        calibration: Option<PathBuf>,
    },
    /// Score trajectories with a trained forecaster.
    Score {
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// Trajectory CSV or a scenario report directory.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Print sealed ledger records as JSON lines.
    Query {
        /// Ledger export or scenario report directory.
        #[arg(long, value_name = "DIR")]
        ledger: PathBuf,
        #[arg(long)]
        agent: Option<String>,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, value_name = "EPOCH")]
        from_epoch: Option<u64>,
        #[arg(long, value_name = "EPOCH")]
        to_epoch: Option<u64>,
    },
    /// Write `records.csv` and `blocks.csv` for a ledger export.
    Export {
        #[arg(long, value_name = "DIR")]
        ledger: PathBuf,
    },
    /// Re-import a ledger export and check chain, signatures and proofs.
    Verify {
        #[arg(long, value_name = "DIR")]
        ledger: PathBuf,
    },
}

impl Cli {
    fn out_dir(&self) -> CliResult<&PathBuf> {
        self.out.as_ref().ok_or_else(|| usage("--out is required"))
    }
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Run => {
            let cfg = config::load(cli.config.as_deref(), None, &cli.overrides, cli.seed)?;
            cfg.validate().map_err(usage)?;
            let out = cli.out_dir()?;
            let report = regulus_core::simulation::run_scenario(&cfg).map_err(domain)?;
            regulus_core::simulation::write_report(&report, out).map_err(domain)?;
            log::info!("report written to {}", out.display());
            config::print_json(&report.summary)
        }
        Command::Train { data, calibration } => forecast::train(cli, data, calibration.as_deref(), cli.out_dir()?),
        Command::Score { model, data } => forecast::score(model, data, cli.out_dir()?),
        Command::Query {
            ledger: dir,
            agent,
            kind,
            from_epoch,
            to_epoch,
        } => ledger::query(dir, agent.as_deref(), kind.as_deref(), *from_epoch, *to_epoch),
        Command::Export { ledger: dir } => ledger::export(dir, cli.out_dir()?),
        Command::Verify { ledger: dir } => ledger::verify(dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REGULUS_LOG", "error")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Domain(msg)) = &f;
            eprintln!("regulus: {msg}");
            ExitCode::from(f.code())
        }
    }
}
