mod backend;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing or malformed argument)
  3  I/O error (missing input file, unwritable output)
  4  parse or validation error (bad annotation, replay or config contents)
  5  backend or pipeline error (replay miss, grid size mismatch, unknown image)";

/// Hybrid detection/density counting of tiny objects.
#[derive(Debug, Parser)]
#[command(name = "tinycount", version, after_help = EXIT_CODES)]
pub struct Cli {
    /// Seed for every random choice (synthetic scenes and error models).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Log verbosity.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count every image of an annotation file with the hybrid pipeline.
    #[command(after_help = EXIT_CODES)]
    Count(CountArgs),
    /// Count and score: AP, MAE, RMSE and a per-image TP/FP/FN table.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Sweep the switch threshold, tile window or tile overlap.
    #[command(after_help = EXIT_CODES)]
    Sweep(SweepArgs),
    /// Generate a synthetic annotated dataset.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Write ground-truth density maps for an annotation file.
    #[command(name = "density-gen", after_help = EXIT_CODES)]
    DensityGen(DensityGenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NmsModeArg {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    Nms,
    Concat,
}

/// Inputs and pipeline settings shared by count, eval and sweep.
#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Annotation file (newline-delimited JSON, one record per image).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Detector backend: `replay:<detections.ndjson>` or `synthetic:[<model.json>]`.
    #[arg(long)]
    pub detector: String,
    /// Density backend: `replay:<density.bin>` or `synthetic:[<model.json>]`.
    #[arg(long)]
    pub density: String,
    /// Detector count at which an image is routed to the density branch.
    #[arg(long, default_value_t = 165.0)]
    pub switch_threshold: f64,
    /// Minimum score for a detection to be counted.
    #[arg(long, default_value_t = 0.25)]
    pub count_score_threshold: f64,
    /// Tile side in pixels.
    #[arg(long, default_value_t = 256)]
    pub window: u32,
    /// Fraction of the window shared by neighbouring tiles.
    #[arg(long, default_value_t = 0.2)]
    pub overlap: f64,
    /// IoU at which NMS suppresses or decays a box.
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    #[arg(long, value_enum, default_value_t = NmsModeArg::Soft)]
    pub nms: NmsModeArg,
    /// Soft-NMS drops boxes whose decayed score falls below this.
    #[arg(long, default_value_t = 0.001)]
    pub prune_epsilon: f64,
    /// How tile results are combined.
    #[arg(long, value_enum, default_value_t = MergeArg::Nms)]
    pub merge: MergeArg,
    /// Downsampling factor of the density backend's native grid.
    #[arg(long, default_value_t = 8)]
    pub density_scale: u32,
    /// Gaussian sigma used by the synthetic density backend.
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Results file (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// IoU required for a detection to match a ground-truth box.
    #[arg(long, default_value_t = 0.5)]
    pub match_iou: f64,
    /// Report file (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Precision-recall curve as two columns.
    #[arg(long)]
    pub pr_curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    SwitchThreshold,
    Window,
    Overlap,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Range start (with --to and --step).
    #[arg(long, requires_all = ["to", "step"], conflicts_with = "values")]
    pub from: Option<f64>,
    /// Range end, inclusive.
    #[arg(long)]
    pub to: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Explicit comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// IoU required for a match in window and overlap sweeps.
    #[arg(long, default_value_t = 0.5)]
    pub match_iou: f64,
    /// Report file (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Two-column curve file (parameter, metric).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for annotations.ndjson and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of normal-density images.
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    /// Number of additional high-density images.
    #[arg(long, default_value_t = 0)]
    pub high_images: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: u32,
    #[arg(long, default_value_t = 50)]
    pub max_count: u32,
    #[arg(long, default_value_t = 150)]
    pub high_min_count: u32,
    #[arg(long, default_value_t = 300)]
    pub high_max_count: u32,
    /// Images with at least this many objects are flagged high density.
    #[arg(long, default_value_t = 150)]
    pub high_cut: u32,
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    #[arg(long, default_value_t = 640)]
    pub height: u32,
    /// Also write detections.ndjson and density.bin from the synthetic
    /// backends, for use with `replay:` backends.
    #[arg(long)]
    pub emit_replay: bool,
    /// Error model for --emit-replay (JSON); defaults otherwise.
    #[arg(long)]
    pub error_model: Option<PathBuf>,
    /// Native density scale for --emit-replay.
    #[arg(long, default_value_t = 8)]
    pub density_scale: u32,
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridFormat {
    Bin,
    Csv,
}

#[derive(Debug, Args)]
pub struct DensityGenArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Output directory; one file per image named after its id.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    /// Kernel radius in multiples of sigma.
    #[arg(long, default_value_t = 4.0)]
    pub truncation: f64,
    /// Sum-pool the map by this factor before writing.
    #[arg(long, default_value_t = 1)]
    pub scale: u32,
    #[arg(long, value_enum, default_value_t = GridFormat::Bin)]
    pub format: GridFormat,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.log_level {
        LogLevel::Off => log::LevelFilter::Off,
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
