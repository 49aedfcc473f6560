use clap::{Args, Parser, Subcommand};
use qtn::cli;
use qtn::config::ExperimentConfig;
use qtn::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "qtn",
    version,
    about = "Quantile-regression VAEs, conformal calibration, FDR-controlled \
             anomaly detection and multi-rater quantile segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(Common),
    /// Train a model (config key `mode` selects vae | qrvae | bqr).
    Train(Common),
    /// Compute a split-conformal calibration margin.
    Calibrate(Common),
    /// Run detection/segmentation with a trained model.
    Detect(Common),
    /// Recompute summary tables from detect outputs.
    Eval(Common),
}

fn run() -> qtn::Result<()> {
    let cli = Cli::parse();
    let (common, f): (&Common, fn(&ExperimentConfig, &std::path::Path) -> qtn::Result<()>) =
        match &cli.command {
            Command::Simulate(c) => (c, cli::cmd_simulate),
            Command::Train(c) => (c, cli::cmd_train),
            Command::Calibrate(c) => (c, cli::cmd_calibrate),
            Command::Detect(c) => (c, cli::cmd_detect),
            Command::Eval(c) => (c, cli::cmd_eval),
        };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    f(&cfg, &common.out)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
