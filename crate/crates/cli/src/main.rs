//! `weakloc`: batch front-end for the weak-disorder experiments.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use weakloc_core::Error;

use crate::commands::Command;
use crate::config::RunConfig;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_REGIME: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "weakloc", version, about = "Weak-disorder localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides output.directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides experiment.threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed; overrides experiment.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::InvalidGrid(_) | Error::InvalidModel(_) | Error::Expression { .. } | Error::InvalidLaw(_) => EXIT_CONFIG,
        _ => EXIT_REGIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let Some(path) = &cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(EXIT_CONFIG);
    };
    let mut cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: malformed config {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.experiment.threads = t;
    }
    if cfg.experiment.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.experiment.threads).build_global() {
            eprintln!("warning: thread pool already initialised: {e}");
        }
    }
    let outcome = match commands::run(cli.command, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(error_code(&e));
        }
    };
    let dir = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    if let Err(e) = output::write_all(&dir, cli.command.name(), &cfg, &outcome) {
        eprintln!("error: writing {}: {e}", dir.display());
        return ExitCode::from(EXIT_REGIME);
    }
    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if outcome.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}
