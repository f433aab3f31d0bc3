//! `hydronet` command line: dataset generation, training, evaluation,
//! hyperparameter search, sensitivity maps, long-term records and gradient
//! checks, all driven by one TOML config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hydronet::models::ArchKind;
use hydronet::oracle::Target;

use commands::{SensArgs, SplitChoice};
use config::RunConfig;
use error::CliError;

pub const THREADS_ENV: &str = "HYDRONET_THREADS";

#[derive(Parser)]
#[command(name = "hydronet", version, about = "Operator-learning surrogate for stormwater separator fields")]
struct Cli {
    /// TOML run config; built-in desk defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an SWDS1 dataset from the oracle.
    Generate {
        /// Overrides paths.dataset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one network and write its checkpoint and loss history.
    Train {
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Per-case metrics, category bins, log-normal fits and parity histograms.
    Eval {
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Hyperparameter search with a tree-structured Parzen estimator.
    Hpo {
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Concentration sensitivities to the loading parameters on the mid-plane.
    Sens {
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        arch: Option<String>,
        /// Settling velocity (m/s).
        #[arg(long, default_value_t = 7.5e-5)]
        ws: f64,
        /// Query time (s); repeatable.
        #[arg(long = "time", default_values_t = vec![230.0])]
        times: Vec<f64>,
        #[arg(long, default_value_t = 41)]
        nx: usize,
        #[arg(long, default_value_t = 41)]
        nz: usize,
        /// Loading `lambda,k,theta,c0,kd`; canonical baseline when omitted.
        #[arg(long, value_delimiter = ',', num_args = 5)]
        params: Option<Vec<f64>>,
    },
    /// Segment a continuous record, fit events and predict effluent.
    Longterm {
        #[arg(long)]
        arch: Option<String>,
        /// Use the oracle instead of a trained checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Verify reverse-mode gradients of all architectures.
    Gradcheck {
        #[arg(long, default_value_t = 25)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn apply_overrides(cfg: &mut RunConfig, target: Option<String>, arch: Option<String>) -> Result<(), CliError> {
    if let Some(t) = target {
        cfg.training.target = t.parse::<Target>().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(a) = arch {
        cfg.architecture.kind = a.parse::<ArchKind>().map_err(|e| CliError::Config(e.to_string()))?;
    }
    cfg.validate()
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<String, CliError> {
    configure_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate { out } => commands::generate(&cfg, out),
        Command::Train { target, arch } => {
            apply_overrides(&mut cfg, target, arch)?;
            commands::train_cmd(&cfg)
        }
        Command::Eval { target, arch, split, bins } => {
            apply_overrides(&mut cfg, target, arch)?;
            commands::eval(&cfg, split, bins)
        }
        Command::Hpo { target, arch } => {
            apply_overrides(&mut cfg, target, arch)?;
            commands::hpo(&cfg)
        }
        Command::Sens { target, arch, ws, times, nx, nz, params } => {
            apply_overrides(&mut cfg, target, arch)?;
            let params = params.map(|v| [v[0], v[1], v[2], v[3], v[4]]);
            commands::sens(&cfg, &SensArgs { settling_velocity: ws, times, nx, nz, params })
        }
        Command::Longterm { arch, oracle } => {
            apply_overrides(&mut cfg, Some(Target::Concentration.name().to_string()), arch)?;
            commands::longterm(&cfg, oracle)
        }
        Command::Gradcheck { draws, seed } => commands::gradcheck(draws, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
