//! Batch driver for the biparam-core experiments: configuration, file
//! formats and report writing.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_FAILURE, EXIT_OK};
use crate::report::Bundle;

#[derive(Debug, Parser)]
#[command(name = "biparam", version, about = "Bi-parameter square function experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, Subcommand, PartialEq, Eq)]
pub enum Command {
    /// Sampled constants of the kernel assumptions.
    VerifyKernel,
    /// Monte-Carlo check of the averaging identity.
    McAverage,
    /// Term decomposition ledger.
    Decompose,
    /// Journé's lemma on a family of open sets.
    Journe,
    /// Carleson sums over open sets, and their translation invariance.
    Necessity,
    /// Good-cube probability estimates.
    PiGood,
}

fn execute(cli: &Cli) -> Result<Bundle, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Context::new(cfg, cli.jobs)?;
    match cli.command {
        Command::VerifyKernel => commands::verify_kernel(&ctx),
        Command::McAverage => commands::mc_average(&ctx),
        Command::Decompose => commands::decompose(&ctx),
        Command::Journe => commands::journe(&ctx),
        Command::Necessity => commands::necessity(&ctx),
        Command::PiGood => commands::pi_good(&ctx),
    }
}

/// Runs one command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let bundle = match execute(cli) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Err(e) = bundle.write(&cli.out) {
        eprintln!("error: writing {}: {e}", cli.out.display());
        return EXIT_FAILURE;
    }
    print!("{}", bundle.summary);
    if bundle.pass {
        EXIT_OK
    } else {
        println!("FAIL");
        EXIT_FAILURE
    }
}
