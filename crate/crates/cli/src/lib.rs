//! `sacflow` command line: training runs, pretraining, demonstrations,
//! gradient checks, diagnostics, evaluation and plot export.
//!
//! Exit codes: 0 on success, 2 on configuration errors (including bad
//! arguments), 3 when training hits a non-finite value, 1 otherwise.

pub mod commands;
pub mod config;
pub mod rundir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sacflow::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sacflow", version, about = "Flow-policy soft actor-critic experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources, applied in order: preset defaults, `--config`,
/// each `--set`, then `--seed`.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// Flat JSON file with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set velocity.kind=flow_t`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue the run in this directory from its latest checkpoint.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["config", "set", "seed"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Flow-matching pretraining on demonstrations or bandit data.
    PretrainFm(ConfigArgs),
    /// Soft actor-critic from scratch.
    TrainScratch(TrainArgs),
    /// Offline phase on expert demonstrations, then online fine-tuning.
    TrainO2o(TrainArgs),
    /// Write scripted-expert demonstrations to a text file.
    GenDemos {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sparse_reach")]
        env: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-step gradient norms at initialization for every velocity kind.
    DiagGrads {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Gain on the fan-in init bound of the velocity networks.
        #[arg(long, default_value_t = 1.0)]
        init_gain: f64,
        /// Entropy weight of the probed actor loss.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Slope of the scalar linear field profiled alongside.
        #[arg(long, default_value_t = 1.0)]
        linear_w: f64,
    },
    /// Evaluate the policy stored in a run directory.
    Eval {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Checkpoint file; defaults to the latest one in the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render figures through the Python report package.
    ExportPlots {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
