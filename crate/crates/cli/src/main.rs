mod commands;

use clap::{Args, Parser, Subcommand};
use lrnnet::attention::RegionGrid;
use lrnnet::cost::Convention;
use lrnnet::network::ModelVariant;
use lrnnet::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "lrnnet", version, about = "Build, audit, train and run the light-weight segmentation model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP report of a full-size model.
    Audit(AuditArgs),
    /// Power-iteration keys against exact SVD on a random bottleneck.
    SvnDemo(SvnDemoArgs),
    /// Wall-clock latency of a forward pass or of the attention operators.
    Bench(BenchArgs),
    /// Train a toy model on synthetic scenes.
    Train(TrainArgs),
    /// Per-class IoU of a checkpoint on synthetic scenes.
    Eval(EvalArgs),
    /// Label map for one PPM image.
    Infer(InferArgs),
    /// Write synthetic scenes as PPM images and PGM masks.
    GenData(GenDataArgs),
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Comma-separated region grids such as `8x8,4x4`.
#[derive(Clone, Debug)]
struct GridList(Vec<RegionGrid>);

fn parse_grids(s: &str) -> Result<GridList, String> {
    s.split(',')
        .map(|g| g.trim().parse::<RegionGrid>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(GridList)
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_convention(s: &str) -> Result<Convention, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for compute kernels.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, value_parser = parse_variant, default_value = "C")]
    model: ModelVariant,
    #[arg(long, value_parser = parse_size, default_value = "512x1024")]
    size: (usize, usize),
    #[arg(long, value_parser = parse_convention, default_value = "macs")]
    convention: Convention,
    #[arg(long, default_value_t = 19)]
    classes: usize,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SvnDemoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_grids, default_value = "8x8")]
    grids: GridList,
    #[arg(long = "power-iters", default_value_t = 2)]
    power_iters: usize,
    /// Bottleneck spatial size.
    #[arg(long, value_parser = parse_size, default_value = "64x128")]
    size: (usize, usize),
    /// Bottleneck channels.
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Skip the dense non-local comparison.
    #[arg(long)]
    skip_standard: bool,
    #[arg(long, value_parser = parse_convention, default_value = "macs")]
    convention: Convention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum BenchTarget {
    Model,
    Attention,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "model")]
    target: BenchTarget,
    #[arg(long, value_parser = parse_variant, default_value = "A")]
    model: ModelVariant,
    /// Input size for `model` (default 256x512) or bottleneck size for
    /// `attention` (default 64x128).
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Use the toy-width model instead of the full-size one.
    #[arg(long)]
    toy: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, value_parser = parse_size, default_value = "64x128")]
    size: (usize, usize),
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long = "train-size", default_value_t = 512)]
    train_size: usize,
    #[arg(long = "val-size", default_value_t = 64)]
    val_size: usize,
    /// Seed of the synthetic scenes.
    #[arg(long = "data-seed", default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_variant, default_value = "C")]
    model: ModelVariant,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long = "lr", default_value_t = 0.01)]
    base_lr: f64,
    #[arg(long = "checkpoint-every", default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Print the loss every this many iterations (0 silences progress).
    #[arg(long = "print-every", default_value_t = 100)]
    print_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expected toy model; checked against the checkpoint.
    #[arg(long, value_parser = parse_variant)]
    model: Option<ModelVariant>,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    model: Option<ModelVariant>,
    /// Number of classes of the expected model.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Binary PPM input.
    #[arg(long)]
    input: PathBuf,
    /// Binary PGM label map.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) => 2,
        Error::Checkpoint(_) => 3,
        Error::Io(_) | Error::Data(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Audit(a) => commands::audit(&a),
        Command::SvnDemo(a) => commands::svn_demo(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::GenData(a) => commands::gen_data(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
