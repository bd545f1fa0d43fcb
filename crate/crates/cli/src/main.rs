use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hscsfl_cli::commands::{self, ConfigSource};
use hscsfl_cli::presets::{Preset, DATA_DIR_ENV};

#[derive(Parser)]
#[command(name = "hscsfl", version, about = "Federated learning under label-flipping attacks")]
struct Cli {
    /// Directory holding `mnist/` and `fashion-mnist/` IDX files.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Named preset, e.g. strategy1-mnist09-hscsfl.
    #[arg(long)]
    preset: Option<String>,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-client class counts of a partition.
    Partition {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "partition.csv")]
        out: PathBuf,
    },
    /// Run one experiment and write its records and summary.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Save the global model every N rounds.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Keep the client gradients of these rounds (repeatable).
        #[arg(long = "snapshot-round")]
        snapshot_rounds: Vec<usize>,
    },
    /// Project a gradient snapshot onto its principal components.
    AnalyzePca {
        #[arg(long)]
        gradients: PathBuf,
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, default_value = "pca.csv")]
        out: PathBuf,
    },
    /// Tabulate final accuracies of finished runs.
    Report {
        /// Run directories or summary.json files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Run several presets over several seeds.
    Sweep {
        #[arg(long = "preset", required = true)]
        presets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print every preset name.
    Presets,
}

fn source(s: Source, data_dir: PathBuf) -> ConfigSource {
    ConfigSource {
        preset: s.preset,
        config: s.config,
        data_dir,
        seed: s.seed,
        rounds: s.rounds,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition { source: s, out } => {
            let cfg = source(s, cli.data_dir).resolve()?;
            commands::partition(&cfg, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Run {
            source: s,
            out,
            checkpoint_every,
            snapshot_rounds,
        } => {
            let mut cfg = source(s, cli.data_dir).resolve()?;
            if let Some(k) = checkpoint_every {
                cfg.checkpoint_every = k;
            }
            if !snapshot_rounds.is_empty() {
                cfg.snapshot_rounds = snapshot_rounds;
            }
            cfg.validate()?;
            let result = commands::run(&cfg, &out)?;
            let last = result.final_record();
            eprintln!(
                "{}: global accuracy {:.4} after {} rounds ({:.1?}); wrote {}",
                cfg.name,
                last.global_accuracy,
                last.round,
                result.duration,
                out.display()
            );
        }
        Command::AnalyzePca {
            gradients,
            components,
            out,
        } => {
            commands::analyze_pca(&gradients, components, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Report { runs, out } => {
            commands::report(&runs, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Sweep {
            presets,
            seeds,
            out,
            jobs,
        } => {
            let dirs = commands::sweep(&presets, &seeds, &cli.data_dir, &out, jobs)?;
            eprintln!("{} runs; report in {}", dirs.len(), out.join("report.csv").display());
        }
        Command::Presets => {
            for p in Preset::catalog() {
                println!("{p}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
