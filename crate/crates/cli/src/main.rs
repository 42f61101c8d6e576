mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use layerscene::model::InterpolationMode;

use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "layerscene", version, about = "Layered object-centric scene model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth masks and depth order.
    GenData {
        /// Scene generator: polygons, sprites or two-squares.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image side (sprites only).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Fewest objects per scene (sprites only).
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        /// Most objects per scene (sprites only).
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
    },
    /// Train the model (stage 1, stage 2 or both), resuming from `<out>/checkpoint` if present.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Draw scenes from the generative model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ignore the scene-level prior: uniform positions, standard-normal appearance and depth.
        #[arg(long)]
        no_hyperprior: bool,
        /// JSON list of `[row, col]` per slot, or an object of latent overrides.
        #[arg(long)]
        fix_positions: Option<PathBuf>,
    },
    /// Infer and render the latent decomposition of dataset images.
    Decompose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Only the first this many images of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score decompositions against ground truth (mIOU, aIOU, DPA, MSE).
    Eval {
        /// Required unless --oracle is given.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Path of the JSON report; CSV tables are written beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long, default_value_t = layerscene::metrics::DEFAULT_DPA_THRESHOLD)]
        dpa_threshold: usize,
        /// Score the ground truth itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Render a linear path in latent space between two images.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// positions, appearance or joint.
        #[arg(long)]
        mode: InterpolationMode,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            kind,
            count,
            seed,
            out,
            size,
            min_objects,
            max_objects,
        } => commands::gen_data::run(&kind, count, seed, &out, size, min_objects, max_objects),
        Command::Train {
            data,
            config,
            out,
            stage,
        } => commands::train::run(&data, config.as_deref(), &out, stage),
        Command::Sample {
            ckpt,
            count,
            seed,
            out,
            no_hyperprior,
            fix_positions,
        } => commands::sample::run(&ckpt, count, seed, &out, no_hyperprior, fix_positions.as_deref()),
        Command::Decompose {
            ckpt,
            data,
            out,
            split,
            limit,
        } => commands::decompose::run(&ckpt, &data, &out, split, limit),
        Command::Eval {
            ckpt,
            data,
            report,
            split,
            dpa_threshold,
            oracle,
        } => commands::evaluate::run(ckpt.as_deref(), &data, &report, split, dpa_threshold, oracle),
        Command::Interpolate {
            ckpt,
            image_a,
            image_b,
            mode,
            steps,
            out,
        } => commands::interpolate::run(&ckpt, &image_a, &image_b, mode, steps, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
