//! Command-line surface for the entry-navigation pipeline: atmosphere
//! generation, exponential fitting, offline training, single-run simulation,
//! Monte Carlo sweeps, and report summarization.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::{parse_filter_list, ConfigError, LogLevel, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "entrynav", version, about = "Martian entry navigation simulation")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded surrogate atmosphere profile CSVs plus a manifest.
    GenAtmos {
        /// Number of profiles.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Least-squares exponential fit over the stored profiles.
    FitExp {
        /// Write the fit JSON here instead of stdout.
        #[arg(long)]
        fit_out: Option<PathBuf>,
    },
    /// Fit the exponential model and train the density network offline.
    Train,
    /// Run one Monte Carlo case and write full per-epoch traces.
    Simulate {
        /// Run index within the seeded batch.
        #[arg(long, default_value_t = 0)]
        run: u64,
        /// Comma-separated filter list (ukf_cm,ukf_ac,uskf_nn).
        #[arg(long)]
        filters: Option<String>,
    },
    /// Run the Monte Carlo batch and write summary JSON + CSV series.
    Montecarlo {
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Comma-separated filter list (ukf_cm,ukf_ac,uskf_nn).
        #[arg(long)]
        filters: Option<String>,
    },
    /// Re-print the tables from an existing summary JSON.
    Report {
        /// Summary file; defaults to <out_dir>/summary.json.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    if cfg.log_level == LogLevel::Debug {
        eprintln!("config: {}", cfg.to_json());
    }
    match cli.command {
        Command::GenAtmos { count } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.atmos_dir.clone());
            commands::gen_atmos(&cfg, count, cfg.mc.seed, &dir)
        }
        Command::FitExp { fit_out } => commands::fit_exp(&cfg, fit_out.as_deref()),
        Command::Train => commands::train(&cfg),
        Command::Simulate { run, filters } => {
            if let Some(list) = filters {
                cfg.mc.filters = parse_filter_list(&list)?;
            }
            commands::simulate(&cfg, run)
        }
        Command::Montecarlo { runs, filters } => {
            if let Some(n) = runs {
                cfg.mc.n_runs = n;
                cfg.mc.validate().map_err(|e| ConfigError(e.to_string()))?;
            }
            if let Some(list) = filters {
                cfg.mc.filters = parse_filter_list(&list)?;
            }
            commands::montecarlo(&cfg)
        }
        Command::Report { summary } => {
            let path = summary.unwrap_or_else(|| cfg.paths.out_dir.join("summary.json"));
            commands::report(&path)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
