//! `softflow` command-line driver.
//!
//! Exit codes: 0 success, 1 failed check or general error, 2 data or format
//! error (also usage errors), 3 resume mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{GenData, StageArg};
use config::{Axis, RunConfig};

#[derive(Parser)]
#[command(
    name = "softflow",
    version,
    about = "Flow-policy training, evaluation and checks"
)]
struct Cli {
    /// Run configuration (TOML). Relative paths inside it resolve against
    /// SOFTFLOW_RUN_ROOT when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a demonstration corpus.
    GenData {
        /// Environment; overrides the config.
        #[arg(long)]
        env: Option<String>,
        /// Number of episodes.
        #[arg(long)]
        n: Option<usize>,
        /// Fraction of failed episodes.
        #[arg(long)]
        fail_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the config's data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run one training stage or the whole plan.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// With `--stage all`, continue after the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with plain sampling and best-of-N side by side.
    Eval {
        /// Defaults to the latest checkpoint in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics file; defaults to metrics.jsonl in the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the numerical verification suites.
    Check {
        /// Run only suites or checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Also verify that these checkpoint files load.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Train once per value of an ablation axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated values; defaults to the axis's reference grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = cli.config.as_ref();
    match cli.cmd {
        Cmd::GenData {
            env,
            n,
            fail_frac,
            seed,
            out,
            overwrite,
        } => {
            let mut cfg = load_config(config)?;
            if let Some(e) = env {
                cfg.env = e;
                cfg.validate()?;
            }
            let args = GenData {
                episodes: n,
                fail_frac,
                seed,
                out,
                overwrite,
            };
            commands::gen_data(&cfg, &args)?;
        }
        Cmd::Train { stage, resume } => {
            commands::train(&load_config(config)?, stage, resume)?;
        }
        Cmd::Eval {
            checkpoint,
            episodes,
            seed,
            output,
        } => {
            commands::eval(&load_config(config)?, checkpoint, episodes, seed, output)?;
        }
        Cmd::Check { filter, checkpoint } => {
            if !commands::check(filter.as_deref(), &checkpoint)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Sweep { axis, values } => {
            commands::sweep(&load_config(config)?, axis, values)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<softflow::Error>()
                .map_or(1, softflow::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
