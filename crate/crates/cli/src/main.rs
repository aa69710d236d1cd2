//! `omg`: synthetic data, preprocessing, prompts, training and evaluation
//! for multi-granularity text-to-vehicle retrieval.
//!
//! Machine-readable output goes to stdout, logs to stderr. Exit codes:
//! 0 ok, 1 usage, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use omg_core::OmgError;

use crate::config::{GranularityToggles, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "omg",
    version,
    about = "Multi-granularity natural-language vehicle retrieval"
)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for everything random.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write motion maps, box files and a hashed manifest for every track.
    Preprocess(PreprocessArgs),
    /// Print the extracted color, type and prompt of every track.
    Prompt(PromptArgs),
    /// Train a model and write a checkpoint and a loss trace.
    Train(TrainArgs),
    /// Rank tracks with a checkpoint or a precomputed similarity tensor.
    Eval(EvalArgs),
    /// Generate a synthetic world.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Inputs {
    /// Track JSON file.
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Directory of `<id>/<frame>.omgt` images for tracks without a scene.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct Toggles {
    /// Use the context crop branch.
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    context: Option<bool>,
    /// Use the motion map branch.
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    motion: Option<bool>,
    /// Use the three local sentences.
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    local: Option<bool>,
    /// Use the color-type prompt.
    #[arg(long, action = ArgAction::Set, value_name = "BOOL")]
    prompt: Option<bool>,
}

impl From<&Toggles> for GranularityToggles {
    fn from(t: &Toggles) -> Self {
        GranularityToggles {
            context: t.context,
            motion: t.motion,
            local: t.local,
            prompt: t.prompt,
        }
    }
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Output directory for `checkpoint.omgt` and `loss.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[command(flatten)]
    toggles: Toggles,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, conflicts_with = "similarity")]
    checkpoint: Option<PathBuf>,
    /// OMGT tensor of shape [queries, gallery, pairs]; query i matches gallery item i.
    #[arg(long)]
    similarity: Option<PathBuf>,
    /// Frames averaged per gallery track.
    #[arg(long)]
    mft: Option<usize>,
    /// Also write the results here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Distinct vehicle identities.
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// Identities that appear in three tracks each; defaults to min(8, n).
    #[arg(long)]
    repeated_ids: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    #[arg(long, default_value_t = 20)]
    frames_per_track: usize,
    /// Also write every frame as `frames/<id>/<frame>.omgt`.
    #[arg(long)]
    write_frames: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<commands::Usage>()) {
        return 1;
    }
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<OmgError>())
        .any(OmgError::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

fn set_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("OMG_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("OMG_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = set_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = RunConfig::load(cli.config.as_deref()).and_then(|mut cfg| {
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
        }
        commands::run(cli.command, cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
