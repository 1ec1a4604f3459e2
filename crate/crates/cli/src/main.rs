mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use efrlfn::model::Attention;
use efrlfn::Activation;

/// Real-time single-image super-resolution toolkit.
#[derive(Parser, Debug)]
#[command(name = "efrlfn", version, about)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Flat key=value file; each key mirrors a long flag of the subcommand.
    /// Flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Upscale one image or every image in a directory.
    Infer(InferArgs),
    /// Measure forward-pass throughput.
    Bench(BenchArgs),
    /// PSNR/SSIM of SR images against HR references.
    Metrics(MetricsArgs),
    /// Bradley–Terry scores from pairwise preference responses.
    Rank(RankArgs),
    /// Dataset curation steps.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Write per-block feature maps as grayscale images.
    DumpFeatures(DumpArgs),
    /// Run an architecture or loss ablation grid at desk scale.
    Ablate(AblateArgs),
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(r @ (2 | 4)) => Ok(r),
        _ => Err(format!("`{s}` is not a supported scale (2 or 4)")),
    }
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    Activation::parse(s).ok_or_else(|| format!("unknown activation `{s}` (tanh, relu, shifted_sigmoid)"))
}

fn parse_attention(s: &str) -> Result<Attention, String> {
    Attention::parse(s).ok_or_else(|| format!("unknown attention `{s}` (eca, esa)"))
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = efrlfn::model::DEFAULT_CHANNELS)]
    channels: usize,
    #[arg(long, default_value_t = efrlfn::model::DEFAULT_BLOCKS)]
    blocks: usize,
    #[arg(long, default_value = "tanh", value_parser = parse_activation)]
    activation: Activation,
    #[arg(long, default_value = "eca", value_parser = parse_attention)]
    attention: Attention,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of HR images (P6). Without it, procedural images are used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of real LR images matched to --data by file name.
    #[arg(long)]
    lr_dir: Option<PathBuf>,
    /// Number of procedural HR images when --data is absent.
    #[arg(long, default_value_t = 8)]
    synthetic: usize,
    /// Side of each procedural HR image.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2, value_parser = parse_scale)]
    scale: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// HR patch side; a multiple of --scale.
    #[arg(long, default_value_t = 64)]
    patch: usize,
    /// full, no_charb, no_vgg, no_sobel, l1, l2 or lpips_placeholder.
    #[arg(long, default_value = "full")]
    loss: String,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Training-set PSNR period in steps; 0 disables it.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    cosine_decay: bool,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// EFRT archive of VGG-19 weights for the perceptual term.
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Weight file or checkpoint directory.
    #[arg(long)]
    weights: PathBuf,
    /// An image or a directory of images.
    #[arg(long)]
    input: PathBuf,
    /// Output image, or directory when --input is a directory.
    #[arg(long)]
    out: PathBuf,
    /// Expected upscaling factor; must match the weights.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Weight file or checkpoint directory; a fresh model is built without it.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = parse_scale)]
    scale: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long, default_value_t = efrlfn::bench::DEFAULT_FRAMES)]
    frames: usize,
    #[arg(long, default_value_t = efrlfn::bench::DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = efrlfn::bench::DEFAULT_WARMUP)]
    warmup: usize,
    /// LR input height.
    #[arg(long, default_value_t = 180)]
    height: usize,
    /// LR input width.
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Also time bicubic upscaling of the same frames.
    #[arg(long)]
    bicubic: bool,
    /// Output directory for bench.csv and bench.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    sr: PathBuf,
    #[arg(long)]
    hr: PathBuf,
    /// CSV with one row per image plus mean and ci95 rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    /// CSV: worker,pair_left,pair_right,choice,verified.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long, default_value_t = efrlfn::ranking::DEFAULT_BOOTSTRAP)]
    bootstrap: usize,
    /// CSV: item,score,ci_low,ci_high.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Decide whether a clip opens with a static intro.
    Filter(FilterArgs),
    /// Cluster feature records and assign test/train/val.
    Categorize(CategorizeArgs),
    /// Copy images into test/train/val directories by a split file.
    Split(SplitArgs),
    /// Write bicubic-downscaled LR images.
    Degrade(DegradeArgs),
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    first: PathBuf,
    #[arg(long)]
    f100: PathBuf,
    #[arg(long)]
    f150: PathBuf,
    /// Mean absolute luma difference threshold.
    #[arg(long, default_value_t = efrlfn::dataset::DEFAULT_TAU)]
    tau: f64,
}

#[derive(Args, Debug)]
struct CategorizeArgs {
    /// CSV: id,si,ti,bitrate,quality,e0..e{d-1}.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = efrlfn::dataset::DEFAULT_CLUSTERS)]
    clusters: usize,
    /// CSV: id,split.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// CSV: id,split.
    #[arg(long)]
    split: PathBuf,
    /// Directory holding `<id>.ppm` files.
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_scale)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Block indices, starting at 1; all blocks when omitted.
    #[arg(long, value_delimiter = ',')]
    blocks: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Grid {
    /// Three activations by two attention modules.
    AttentionActivation,
    /// The seven loss variants.
    Loss,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    grid: Grid,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 2, value_parser = parse_scale)]
    scale: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    /// Number of procedural training images.
    #[arg(long, default_value_t = 4)]
    images: usize,
    /// Side of each procedural image.
    #[arg(long, default_value_t = 48)]
    size: usize,
    /// Add a forward-throughput column (not reproducible across runs).
    #[arg(long)]
    fps: bool,
    /// Frames per throughput run when --fps is set.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// CSV output; the table is also printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn command() -> clap::Command {
    fn last_wins(c: clap::Command) -> clap::Command {
        c.args_override_self(true).mut_subcommands(last_wins)
    }
    last_wins(Cli::command())
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let matches = command().get_matches_from(args);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    debug_assert!(cli.config.is_none(), "--config is consumed before parsing");
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
