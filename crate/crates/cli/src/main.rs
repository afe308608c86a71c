//! `ldml` command-line front end.
//!
//! * `estimate` runs the cross-fitted estimator on a CSV file.
//! * `simulate` runs the replication study on the built-in data generator.
//! * `oracle` recomputes the Monte Carlo reference quantile of `Y(1)`.
//!
//! Every command writes one JSON document carrying `"schema_version": 1`.
//! Failures print a JSON error object to stdout and exit nonzero; nothing is
//! written to `--output` unless the whole report was produced.

mod common;
mod estimate;
mod oracle;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::common::CliError;

#[derive(Debug, Parser)]
#[command(name = "ldml", version, about = "Localized debiased machine learning estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a quantile-type parameter from a CSV file.
    Estimate(estimate::EstimateArgs),
    /// Run the replication study on the synthetic design.
    Simulate(simulate::SimulateArgs),
    /// Recompute the Monte Carlo reference quantile of the potential outcome.
    Oracle(oracle::OracleArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Config(e.to_string().trim_end().to_owned())),
    };
    let result = match cli.command {
        Command::Estimate(args) => estimate::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Oracle(args) => oracle::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(err: &CliError) -> ExitCode {
    let code = err.exit_code();
    println!("{}", err.to_json());
    ExitCode::from(code)
}
