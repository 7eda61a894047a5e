//! `motionflow`: synthetic data, training, sampling, editing, retargeting and
//! evaluation from one executable.
//!
//! Every command resolves a [`config::RunConfig`] (preset, then `--config`,
//! then flags), writes into a run directory, and snapshots the resolved
//! configuration next to its outputs.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(name = "motionflow", version, about = "Skeleton-conditioned motion flow matching")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Seed for the command's random stream (data, training, noise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<run-root>/<command>-seed<seed>`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "MOTIONFLOW_RUN_ROOT", default_value = "runs")]
    pub run_root: PathBuf,
}

/// Where the clip to edit or retarget comes from.
#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// BVH file recorded on a built-in humanoid skeleton.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub input: Option<PathBuf>,
    /// Dataset manifest written by `synth-data`; uses the config's data section when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample index within the dataset.
    #[arg(long)]
    pub index: Option<usize>,
}

/// Per-branch guidance overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct BranchWeights {
    #[arg(long)]
    pub src_w_text: Option<f64>,
    #[arg(long)]
    pub src_w_skel: Option<f64>,
    #[arg(long)]
    pub src_w_both: Option<f64>,
    #[arg(long)]
    pub tgt_w_text: Option<f64>,
    #[arg(long)]
    pub tgt_w_skel: Option<f64>,
    #[arg(long)]
    pub tgt_w_both: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the procedural dataset and write its manifest.
    SynthData {
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        /// Also export every clip as BVH under `bvh/`.
        #[arg(long)]
        write_bvh: bool,
    },
    /// Train a model; writes loss.csv, periodic checkpoints and model.ckpt.
    Train {
        /// Dataset manifest; uses the config's data section when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Maximum optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a clip; writes sample.bvh and features.csv.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        /// Skeleton to animate (BVH); the preset's canonical skeleton otherwise.
        #[arg(long)]
        skeleton: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        /// Integration steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        w_text: Option<f64>,
        #[arg(long)]
        w_skel: Option<f64>,
        #[arg(long)]
        w_both: Option<f64>,
    },
    /// Change the prompt of a clip while keeping its skeleton.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Prompt describing the input; the dataset prompt by default.
        #[arg(long)]
        src_prompt: Option<String>,
        #[arg(long)]
        tgt_prompt: String,
        #[arg(long)]
        tau_min: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        weights: BranchWeights,
        /// Reuse one noise draw for every step.
        #[arg(long)]
        frozen_noise: bool,
    },
    /// Move a clip onto another skeleton with the same joint tree.
    Retarget {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// BVH whose skeleton is the target (its motion is ignored).
        #[arg(long)]
        target_skel: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Run a single start `τ_min` instead of the start-step sweep.
        #[arg(long, conflicts_with = "start_steps")]
        tau_min: Option<f64>,
        /// Comma-separated start steps to sweep.
        #[arg(long, value_delimiter = ',')]
        start_steps: Option<Vec<usize>>,
        #[arg(long)]
        frozen_noise: bool,
    },
    /// Retarget held-out test clips across the limb-scale family and report errors.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<usize>,
        /// Pick start steps by bone-length error instead of ground truth.
        #[arg(long)]
        bone_length_selection: bool,
    },
    /// Standardize a BVH file: prune, reorder and scale to unit height.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// TOML joint mapping; identity when absent.
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Multiplier from file units to meters; guessed from bone lengths when absent.
        #[arg(long)]
        unit_scale: Option<f64>,
    },
    /// Finite-difference check of the model gradients at the small config.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Elements checked per tensor (0 checks all).
        #[arg(long, default_value_t = 400)]
        max_elements: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match commands::run(&cli.global, cli.command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::FAILURE
        }
    }
}
