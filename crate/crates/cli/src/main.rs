//! `embleak`: batch analyses of what embedding-table access patterns reveal.

mod args;
mod commands;
mod error;
mod report;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::{CliError, Result};
use crate::report::{emit, render, RunManifest};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too and exit 0
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose {
        "info"
    } else {
        "warn"
    }))
    .target(env_logger::Target::Stderr)
    .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let mut manifest = RunManifest::new(cli.command.name(), argv, cli.seed);
    let started = Instant::now();
    let outcome = commands::dispatch(&cli.command, cli.seed, &mut manifest)?;
    if cli.timing {
        manifest.wall_clock_ms = Some(started.elapsed().as_millis() as u64);
    }
    let outputs = cli.command.outputs();
    emit(outputs.report, &render(&manifest, outcome.result)?)?;
    if let (Some(path), Some(series)) = (outputs.csv, &outcome.series) {
        emit(Some(path), &series.to_csv())?;
    }
    Ok(())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Stats(_) => "stats",
            Command::HashApply(_) => "hash-apply",
            Command::AttackFreq(_) => "attack-freq",
            Command::AttackOmp(_) => "attack-omp",
            Command::AttackGreedy(_) => "attack-greedy",
            Command::Anonymity(_) => "anonymity",
            Command::Ambiguity(_) => "ambiguity",
            Command::ReidentUniqueness(_) => "reident-uniqueness",
            Command::ReidentLink(_) => "reident-link",
            Command::Oracle(_) => "oracle",
        }
    }
}
