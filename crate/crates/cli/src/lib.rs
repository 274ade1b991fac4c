//! Command-line driver: config loading, dispatch and result files.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for failures while running an experiment.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::commands::{dispatch, Context, Summary};
use crate::config::{load_config, Command};
use crate::error::CliError;

pub const OUT_ENV: &str = "SWIMRL_OUT";

#[derive(Debug, Parser)]
#[command(name = "swimrl", version, about = "Swimmer-pair control experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; falls back to the config, then $SWIMRL_OUT, then `results/<config stem>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

/// Runs one parsed invocation.
pub fn execute(cli: &Cli) -> Result<Summary, CliError> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    cfg.validate(cli.command)?;
    if let Some(n) = cfg.workers {
        // Only the first call in a process can size the global pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialised");
        }
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| {
            let stem = cli.config.file_stem().map(PathBuf::from).unwrap_or_default();
            PathBuf::from("results").join(stem)
        });
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let base = cli.config.parent().map(PathBuf::from).unwrap_or_default();
    let mut ctx = Context::new(cli.command, cfg, base, out, cli.quiet);
    dispatch(&mut ctx)?;
    ctx.finish()
}

/// Parses `args` (including the program name) and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("swimrl {}: {e}", cli.command);
            e.exit_code()
        }
    }
}
