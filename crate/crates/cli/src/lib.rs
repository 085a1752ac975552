//! Command-line front end for `sqfc`.
//!
//! Every subcommand writes JSON (with a CSV mirror for tabular results) and a
//! `<out>.manifest.json` recording the resolved configuration, input digests,
//! version and wall time. Exit codes: 0 success, 1 usage, 2 data, 3 numerical.

pub mod args;
pub mod commands;
pub mod demo;
pub mod error;
pub mod output;

use args::{Cli, Command};
use clap::error::ErrorKind;
use clap::Parser;
use commands::Context;
use error::CliError;
use output::Logger;
use std::time::Instant;

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "SQFC_THREADS";

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::usage(format!("{THREADS_ENV} must be a count, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn module(cmd: &Command) -> &'static str {
    match cmd {
        Command::Fit(_) => "fit",
        Command::Curve(_) => "curve",
        Command::Bandwidth(_) => "bandwidth",
        Command::Detrend(_) => "detrend",
        Command::Infer(_) => "infer",
        Command::Simulate(_) => "simulate",
        Command::Mc(_) => "mc",
        Command::Demo(_) => "demo",
    }
}

fn dispatch(ctx: &Context, cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Fit(a) => commands::fit(ctx, a),
        Command::Curve(a) => commands::curve(ctx, a),
        Command::Bandwidth(a) => commands::bandwidth(ctx, a),
        Command::Detrend(a) => commands::detrend(ctx, a),
        Command::Infer(a) => commands::infer(ctx, a),
        Command::Simulate(a) => commands::simulate(ctx, a),
        Command::Mc(a) => commands::mc(ctx, a),
        Command::Demo(a) => demo::run(ctx, a),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let log = Logger { quiet: cli.quiet };
    let name = module(&cli.command);
    let ctx = Context { log, argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(), start: Instant::now() };
    let result = thread_count(cli.threads).and_then(|n| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::usage(format!("cannot start {n} threads: {e}")))?;
        pool.install(|| dispatch(&ctx, &cli.command))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            log.error(name, e.to_string());
            e.exit_code()
        }
    }
}
