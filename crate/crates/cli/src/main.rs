use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use corrmatch_cli::error::Result;
use corrmatch_cli::{ablate, runner, simulate, RunConfig};

#[derive(Parser)]
#[command(name = "corrmatch", about = "Correlation-matching semi-supervised segmentation on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from a run config.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model and log metrics, diagnostics, plots, and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of a mode x components x seed sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Sweep grammar, e.g. modes=relaxed_global,fixed:0.95;components=full,hard;seeds=0,1,2
        #[arg(long)]
        sweep: String,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drive the threshold update with synthetic proposal streams, no model.
    SimulateThreshold {
        /// Stream grammar, e.g. kind=noisy:0.6:0.2;tau0=0.75,0.85,0.95;steps=2000
        #[arg(long)]
        spec: String,
        /// Output CSV path; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config } => {
            let cfg = RunConfig::load(&config)?;
            let path = runner::run_generate(&cfg, Path::new(&cfg.out_dir))?;
            println!("wrote {}", path.display());
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let summary = runner::run_training(&cfg, &dir)?;
            match summary.final_miou {
                Some(miou) => println!(
                    "finished {} iterations, val mIoU {miou:.4}",
                    summary.iterations
                ),
                None => println!("finished {} iterations", summary.iterations),
            }
        }
        Command::Ablate { config, sweep, out } => {
            let cfg = RunConfig::load(&config)?;
            let sweep = ablate::parse_sweep(&sweep, &cfg)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let csv = ablate::run_ablation(&cfg, &sweep, &dir)?;
            println!("wrote {}", csv.display());
        }
        Command::SimulateThreshold { spec, out } => {
            let spec = simulate::parse_spec(&spec)?;
            let csv = simulate::simulate_csv(&spec)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}
