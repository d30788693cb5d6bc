use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rdlab_cli::commands::{emit, run, Command};
use rdlab_cli::config::{ExperimentConfig, OutputFormat};
use rdlab_cli::CliError;

/// Reaction-diffusion experiments: time integration, accuracy tables,
/// stability spectra, Newton steady states and oscillation scans.
#[derive(Parser)]
#[command(name = "rdlab", version)]
struct Cli {
    /// TOML experiment configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Data format (overrides `output.format`).
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    /// Seed of the perturbed initial condition.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(format) = cli.format {
        cfg.output.format = format;
    }
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed)?;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Option<String>, CliError> {
    let cfg = load(cli)?;
    let report = run(cli.command, &cfg)?;
    let written = emit(
        &report,
        &cfg.output.dir,
        cfg.output.format,
        cfg.output.plots,
    )?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(report.failure)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(failure)) => {
            eprintln!("rdlab {}: numerical failure: {failure}", cli.command.name());
            ExitCode::from(CliError::EXIT_NUMERICAL as u8)
        }
        Err(e) => {
            eprintln!("rdlab {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
