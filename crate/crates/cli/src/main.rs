mod args;
mod commands;
mod config;
mod error;

use std::collections::BTreeSet;
use std::process::ExitCode;

use clap::{CommandFactory, Parser};
use dualcassi::parallel::configure_threads;
use dualcassi::Execution;

use crate::args::{Cli, Command};
use crate::commands::Ctx;
use crate::config::FileConfig;
use crate::error::CliError;

/// Config keys a subcommand accepts: its long flags plus the global ones
/// other than `--config`.
fn allowed_keys(sub: &str) -> BTreeSet<String> {
    let cmd = Cli::command();
    let mut keys: BTreeSet<String> = cmd
        .get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| *l != "config")
        .map(str::to_string)
        .collect();
    if let Some(sc) = cmd.find_subcommand(sub) {
        keys.extend(sc.get_arguments().filter_map(|a| a.get_long()).map(str::to_string));
    }
    keys
}

fn run(cli: Cli) -> Result<(), CliError> {
    let keys = allowed_keys(cli.command.name());
    let file = match &cli.config {
        Some(p) => FileConfig::load(p, &keys)?,
        None => FileConfig::default(),
    };
    let threads = file.or("threads", cli.threads, 0usize)?;
    if threads > 0 {
        configure_threads(threads);
    }
    let ctx = Ctx {
        seed: file.pick("seed", cli.seed)?,
        out: file.pick("out", cli.out.clone())?,
        file,
        exec: Execution::default(),
    };
    match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Reconstruct(a) => commands::reconstruct(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::Metrics(a) => commands::metrics(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
