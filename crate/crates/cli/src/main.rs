//! `robdet` — desk-scale robust-detection workbench CLI.
//!
//! Subcommands cover the full pipeline: dataset generation, standard and
//! adversarial training, attack generation, metric evaluation, sweeps, the
//! task-domain ablation grid, transferred attacks, and SVG/text reports.

mod commands;
mod config;
mod manifest;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "robdet", version, about = "Adversarially robust toy object detection workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output directory (default: $ROBDET_OUT when set).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct AttackArgs {
    /// Attack spec as a key=value file (flags below override it).
    #[arg(long)]
    attack_spec: Option<PathBuf>,
    /// none | cls | loc | union | task_oriented | dag_like | rap_like
    #[arg(long)]
    attack: Option<String>,
    /// l-inf budget in pixel units.
    #[arg(long)]
    epsilon: Option<f32>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    step_size: Option<f32>,
    #[arg(long)]
    random_start: Option<bool>,
    #[arg(long)]
    attack_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape datasets (train + test files).
    GenData {
        #[command(flatten)]
        out: OutArg,
        /// key=value config file; flags override.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        /// Foreground classes (3..=6).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        noise_amp: Option<f32>,
    },
    /// Train a detector (std | cls | loc | con | mtd).
    Train {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset (.rdd).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        momentum: Option<f32>,
        #[arg(long)]
        weight_decay: Option<f32>,
        /// Comma-separated step indices; empty = 60%/80% of total.
        #[arg(long)]
        milestones: Option<String>,
        /// Attack budget for the adversarial variants.
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        attack_steps: Option<u32>,
        #[arg(long)]
        attack_step_size: Option<f32>,
    },
    /// Generate adversarial images for a dataset against a checkpoint.
    Attack {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Evaluate mAP / candidate metrics / gradient alignment.
    Eval {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of map50,candidates,alignment.
        #[arg(long, default_value = "map50,candidates")]
        metrics: String,
        /// Images used for gradient alignment.
        #[arg(long, default_value_t = 200)]
        alignment_sample: usize,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// mAP sweeps over attack steps or budgets.
    Sweep {
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated checkpoints, optionally id=path.
        #[arg(long)]
        models: String,
        #[arg(long)]
        data: PathBuf,
        /// steps | epsilon
        #[arg(long)]
        axis: String,
        /// cls | loc
        #[arg(long, default_value = "cls")]
        domain: String,
        #[arg(long, default_value_t = 20)]
        steps: u32,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Model-by-attack mAP grid over the five training variants.
    Ablate {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        std: PathBuf,
        #[arg(long)]
        cls: PathBuf,
        #[arg(long)]
        loc: PathBuf,
        #[arg(long)]
        con: PathBuf,
        #[arg(long)]
        mtd: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        epsilon: f32,
        #[arg(long, default_value_t = 20)]
        steps: u32,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a victim against attacks generated on source checkpoints.
    Transfer {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        victim: PathBuf,
        /// Comma-separated source checkpoints, optionally id=path.
        #[arg(long)]
        sources: String,
        /// dag_like | rap_like
        #[arg(long, default_value = "dag_like")]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        epsilon: f32,
        #[arg(long, default_value_t = 20)]
        steps: u32,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render sweep CSVs as SVG line charts and grids as text tables.
    Report {
        #[command(flatten)]
        out: OutArg,
        /// Comma-separated metric CSV paths.
        #[arg(long)]
        csv: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
