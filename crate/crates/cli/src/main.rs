//! `amnesic`: command-line driver for probing, INLP removal and the
//! behavioral evaluations built on it.

mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use config::{Cli, ExperimentConfig};
use error::CliError;

/// Worker threads from `AMNESIC_THREADS`, when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("AMNESIC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("AMNESIC_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::config(e.to_string().trim_end())),
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    let result = ExperimentConfig::resolve(cli.command.name(), cli.command.flags())
        .and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
