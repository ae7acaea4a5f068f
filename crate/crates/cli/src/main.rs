use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use futurefuse_core::dataset::Holdout;
use futurefuse_core::fusion::EncoderMode;
use futurefuse_core::RasterPolicy;

mod commands;

/// Future-fusion BEV dataset generation, fusion and evaluation.
#[derive(Parser, Debug)]
#[command(name = "futurefuse", version, about, propagate_version = true)]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true, env = "FUTUREFUSE_THREADS")]
    threads: Option<usize>,

    /// Seed for every random draw (overrides a config file seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate terrain, sensor sweeps and ground-truth grids.
    Synth(SynthArgs),
    /// Rasterize the input or label grid of one frame.
    Rasterize(RasterizeArgs),
    /// Export input/label pairs for every frame, optionally with a run holdout.
    Dataset(DatasetArgs),
    /// Run the fusion model forward on grids.
    Fuse(FuseArgs),
    /// Train the fusion model on an exported dataset index.
    TrainToy(TrainArgs),
    /// Score predictions and raw inputs against labels.
    Eval(EvalArgs),
    /// Print the header of a scan, grid, weights or manifest file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Grid extent as LATERALxFORWARD meters.
    #[arg(long)]
    extent: Option<String>,
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct GeometryArgs {
    /// Cell size in meters; defaults to the manifest value.
    #[arg(long)]
    resolution: Option<f64>,
    /// Grid extent as LATERALxFORWARD meters; defaults to the manifest value.
    #[arg(long)]
    extent: Option<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum WhichGrid {
    /// Points up to the frame's stamp only.
    Input,
    /// Points of the whole run.
    Label,
}

#[derive(Args, Debug)]
struct RasterizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    frame_index: usize,
    /// Run to rasterize; defaults to the first run of the manifest.
    #[arg(long)]
    run: Option<String>,
    #[arg(long, default_value_t = RasterPolicy::default())]
    policy: RasterPolicy,
    #[arg(long, value_enum, default_value_t = WhichGrid::Label)]
    grid: WhichGrid,
    /// Let stereo points contribute height.
    #[arg(long)]
    stereo_height: bool,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of runs in (0, 1), or a comma-separated list of run ids.
    #[arg(long)]
    holdout: Option<Holdout>,
    #[arg(long, default_value_t = RasterPolicy::default())]
    policy: RasterPolicy,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    stereo_height: bool,
    /// Spill map tiles to disk beyond this many resident points.
    #[arg(long)]
    max_resident_points: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model configuration file (fusion.* and loss.* keys); overrides the flags below.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    stride: usize,
    #[arg(long, default_value_t = 3)]
    downsample: usize,
    #[arg(long, default_value_t = 4)]
    latent_channels: usize,
    #[arg(long, default_value_t = 4)]
    hidden_channels: usize,
    #[arg(long, default_value = "stacked")]
    mode: EncoderMode,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "index"]))]
struct FuseArgs {
    /// Single input grid.
    #[arg(long, requires = "out")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset index; predictions go to --pred-dir as <frame_id>.dbg1.
    #[arg(long, requires = "pred_dir")]
    index: Option<PathBuf>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Trained weights; without them the model is initialized from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    index: PathBuf,
    /// Output directory for weights.dbw1, model.cfg and loss.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Patch size of the Fréchet features.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Covariance shrinkage added to both feature covariances.
    #[arg(long, default_value_t = 0.0)]
    shrinkage: f64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    log::info!("threads = {}", rayon::current_num_threads());
    let seed = cli.seed;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, seed),
        Command::Rasterize(a) => commands::rasterize(a),
        Command::Dataset(a) => commands::dataset(a),
        Command::Fuse(a) => commands::fuse(a, seed.unwrap_or(0)),
        Command::TrainToy(a) => commands::train(a, seed.unwrap_or(0)),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
