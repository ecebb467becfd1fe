//! `resfcn` — train, evaluate and dissect residual segmentation FCNs.
//!
//! Exit codes: 0 success, 1 failed check or invalid configuration,
//! 2 I/O errors. Diagnostics go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resfcn_core::commands::{
    run_ablate, run_eval, run_gradcheck, run_plot, run_synth, run_train, AblateArgs, DataSource,
    EvalArgs, SynthArgs, TrainArgs,
};

#[derive(Parser)]
#[command(name = "resfcn", version, about = "Residual FCN segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file; writes checkpoint, history CSV
    /// and telemetry CSV into --out.
    Train {
        /// Config file with [network], [[row]] and optional [train] tables.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (images/ + masks/); synthetic data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic sample count when no --data is given.
        #[arg(long, default_value_t = 30)]
        synth_count: usize,
        /// Overrides [train].seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides [train].epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train fraction of the train/validation split.
        #[arg(long, default_value_t = 25.0 / 30.0)]
        val_ratio: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate a checkpoint: losses, pixel accuracy, soft Dice and
    /// foreground-restricted Rand index; optional MC-dropout averaging.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        synth_count: usize,
        /// Seed for synthetic evaluation data.
        #[arg(long, default_value_t = 1000)]
        data_seed: u64,
        /// Number of MC-dropout passes to average (off when absent).
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long, default_value_t = 0.2)]
        mc_rate: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the skip-connection ablation models (long+short, short-only,
    /// long-only) with a shared seed and emit a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 60)]
        synth_count: usize,
        #[arg(long, default_value_t = 50.0 / 60.0)]
        val_ratio: f64,
        /// Also run the variant with both skip types disabled.
        #[arg(long, default_value_t = false)]
        with_no_skip: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        /// Random draws per check.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset to disk in the images/ + masks/ layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a history CSV as curves or a telemetry CSV as a heatmap.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn data_source(data: Option<PathBuf>, synth_count: usize) -> DataSource {
    match data {
        Some(dir) => DataSource::Stack(dir),
        None => DataSource::Synthetic { count: synth_count },
    }
}

fn run(cli: Cli) -> resfcn_core::Result<u8> {
    match cli.command {
        Command::Train {
            config,
            data,
            synth_count,
            seed,
            epochs,
            val_ratio,
            out,
            quiet,
        } => {
            run_train(&TrainArgs {
                config,
                data: data_source(data, synth_count),
                seed,
                epochs,
                val_ratio,
                out,
                quiet,
            })?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            data,
            synth_count,
            data_seed,
            mc_samples,
            mc_rate,
            out,
        } => {
            run_eval(&EvalArgs {
                checkpoint,
                data: data_source(data, synth_count),
                data_seed,
                mc_samples,
                mc_rate,
                out,
            })?;
            Ok(0)
        }
        Command::Ablate {
            config,
            seed,
            epochs,
            synth_count,
            val_ratio,
            with_no_skip,
            out,
            quiet,
        } => {
            run_ablate(&AblateArgs {
                config,
                seed,
                epochs,
                synth_count,
                val_ratio,
                include_no_skip: with_no_skip,
                out,
                quiet,
            })?;
            Ok(0)
        }
        Command::Gradcheck { seeds, out } => {
            let report = run_gradcheck(seeds, out.as_deref())?;
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            run_synth(&SynthArgs {
                out,
                count,
                size,
                seed,
            })?;
            Ok(0)
        }
        Command::Plot { input, out } => {
            run_plot(&input, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
