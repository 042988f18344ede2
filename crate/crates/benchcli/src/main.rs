//! Command-line experiment runner for online spiking-network training.

use anyhow::Context;
use clap::{Parser, Subcommand};
use fptt_bench::config::{ExperimentConfig, TaskId, PRESETS};
use fptt_bench::experiment::{eval_checkpoint, run_experiment};
use fptt_bench::scaling::{fptt_step_time_series, ols, scaling_probe};
use fptt_core::learning::TrainerKind;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fptt-bench",
    about = "Train spiking recurrent networks online (FPTT) or offline (BPTT), probe memory/time scaling, evaluate checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a config file or preset name.
    Train {
        /// Config file path or preset name (see `presets`).
        #[arg(long)]
        config: String,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the dataset root.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Record wall time per step in the CSV (makes files non-identical
        /// across runs).
        #[arg(long)]
        timing: bool,
        /// Override epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override iterations per epoch (add task only).
        #[arg(long)]
        iterations: Option<usize>,
        /// Data-parallel batch shards.
        #[arg(long)]
        shards: Option<usize>,
    },
    /// Probe memory and per-step time scaling across sequence lengths.
    ProbeScaling {
        #[arg(long, value_parser = parse_trainer)]
        trainer: TrainerKind,
        /// Comma-separated sequence lengths, e.g. 100,500,1000.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        /// Update window for fptt-k.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Re-walk all retained tapes at every step (naive IO pattern).
        #[arg(long)]
        rewalk: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also regress per-step FPTT wall time against t for this length.
        #[arg(long)]
        step_series: Option<usize>,
    },
    /// Evaluate a checkpoint on a task's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task id: addtask, smnist, psmnist, rmnist, mnist-static,
        /// fashion-static.
        #[arg(long)]
        task: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Down-sampling factor matching the training run.
        #[arg(long, default_value_t = 1)]
        downsample: usize,
        /// Presentation count for rate/repeat encodings.
        #[arg(long, default_value_t = 20)]
        seq_len: usize,
    },
    /// List embedded experiment presets.
    Presets,
}

fn parse_trainer(s: &str) -> Result<TrainerKind, String> {
    TrainerKind::parse(s).map_err(|e| e.to_string())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            data_dir,
            timing,
            epochs,
            iterations,
            shards,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading config '{config}'"))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(d) = data_dir {
                cfg.data_dir = Some(d);
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            if let Some(s) = shards {
                cfg.shards = s;
            }
            cfg.timing |= timing;

            let summary = run_experiment(&cfg)?;
            println!(
                "task={} trainer={:?} arch={} units={} params={}",
                cfg.task.name(),
                cfg.trainer,
                cfg.arch,
                summary.unit_count,
                summary.param_count
            );
            println!(
                "iterations={} final_metric={:?} final_window_mean={:?} test_accuracy={:?}",
                summary.iterations_run,
                summary.final_metric,
                summary.final_window_mean,
                summary.test_accuracy
            );
            match summary.diverged {
                Some(step) => println!("DIVERGED at step {step} (flagged in CSV)"),
                None => println!("completed"),
            }
            println!("metrics: {}", summary.csv_path.display());
            println!("checkpoint: {}", summary.checkpoint_path.display());
        }
        Command::ProbeScaling {
            trainer,
            lengths,
            k,
            rewalk,
            seed,
            step_series,
        } => {
            let report = scaling_probe(trainer, &lengths, k, rewalk, seed)?;
            print!("{}", report.render());
            if let Some(t_len) = step_series {
                let series = fptt_step_time_series(t_len, 3, seed)?;
                let xs: Vec<f64> = (0..series.len()).map(|t| t as f64).collect();
                let (slope, _, _, half) = ols(&xs, &series);
                println!(
                    "fptt per-step cost vs t over T={t_len} (reference-calibrated): slope={slope:.3e}, 95% CI ±{half:.3e}"
                );
            }
        }
        Command::Eval {
            checkpoint,
            task,
            data_dir,
            seed,
            downsample,
            seq_len,
        } => {
            let task = TaskId::parse(&task)?;
            let mut cfg = ExperimentConfig {
                seed,
                downsample,
                seq_len,
                data_dir,
                ..Default::default()
            };
            cfg.task = task;
            let metric = eval_checkpoint(&checkpoint, task, &cfg)?;
            let label = if task.is_classification() {
                "accuracy"
            } else {
                "mse"
            };
            println!("{label}={metric:.4}");
        }
        Command::Presets => {
            for (name, text) in PRESETS {
                let first = text
                    .lines()
                    .find(|l| l.trim_start().starts_with('#'))
                    .unwrap_or("")
                    .trim_start_matches(['#', ' ']);
                println!("{name:14} {first}");
            }
        }
    }
    Ok(())
}
