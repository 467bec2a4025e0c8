//! `smc`: config-driven runner for the sequential Monte Carlo experiments.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};

use commands::{RunContext, Subcommand};
use error::CliError;
use output::{sha256_hex, ManifestHeader, Versions, MANIFEST_FORMAT};

#[derive(Parser)]
#[command(name = "smc", version, about = "Sequential Monte Carlo experiment runner")]
enum Cli {
    /// Simulate states and observations from a model.
    Simulate(RunArgs),
    /// Bootstrap or auxiliary particle filter.
    Filter(RunArgs),
    /// Ensemble Kalman filter (linear-Gaussian models).
    Enkf(RunArgs),
    /// Forward filter plus backward marginal smoothing.
    Smooth(RunArgs),
    /// Particle marginal Metropolis-Hastings for an unknown transition coefficient.
    Pmmh(RunArgs),
    /// Tempered SMC sampler between two Gaussian mixtures.
    Smc(RunArgs),
    /// Importance splitting for a random-walk level-crossing probability.
    RareEvent(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Also run the exact solver and write a comparison.
    #[arg(long)]
    oracle: bool,
}

fn execute(cmd: Subcommand, args: RunArgs) -> Result<(), CliError> {
    let text = std::fs::read(&args.config)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", args.config.display())))?;
    let config_sha256 = sha256_hex(&text);
    let text = String::from_utf8(text).map_err(|_| CliError::Validation("config: not valid UTF-8".into()))?;
    let config = config::parse(&text)?;
    let seed = config.resolve_seed(args.seed)?;
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Algorithm(format!("thread pool: {e}")))?;
    }
    let config_dir = args.config.parent().map(PathBuf::from).unwrap_or_default();
    let ctx = RunContext { config, config_dir, seed, oracle: args.oracle, out_dir: args.out };
    let outputs = commands::run(cmd, &ctx)?;
    outputs.finish(ManifestHeader {
        format: MANIFEST_FORMAT,
        subcommand: cmd.name().into(),
        config_sha256,
        seed,
        oracle: args.oracle,
        versions: Versions::default(),
    })?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (cmd, args) = match Cli::parse() {
        Cli::Simulate(a) => (Subcommand::Simulate, a),
        Cli::Filter(a) => (Subcommand::Filter, a),
        Cli::Enkf(a) => (Subcommand::Enkf, a),
        Cli::Smooth(a) => (Subcommand::Smooth, a),
        Cli::Pmmh(a) => (Subcommand::Pmmh, a),
        Cli::Smc(a) => (Subcommand::Smc, a),
        Cli::RareEvent(a) => (Subcommand::RareEvent, a),
    };
    match execute(cmd, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("smc {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
