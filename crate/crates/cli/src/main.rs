use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mnet::autodiff::AdamConfig;
use mnet::checkpoint;
use mnet::codec::{
    decode_blocks, decode_scalable, encode_blocks, measure_bpp, Bitstream, FileStream, ScalableMode,
};
use mnet::model::Model;
use mnet::nn::ModelConfig;
use mnet::pc_io::{
    load_dataset, partition_blocks, read_ply_geometry, voxelize, write_ply, Block, PlyFormat,
    PointCloud, BLOCK_SIZE,
};
use mnet::tensor::Coord3;
use mnet::trainer::{evaluate, report_csv, train, TrainConfig};

/// Names the default checkpoint directory; the file inside is `mnet.ckpt`.
const CHECKPOINT_DIR_ENV: &str = "MNET_CHECKPOINT_DIR";
const DEFAULT_CHECKPOINT: &str = "mnet.ckpt";

#[derive(Parser, Debug)]
#[command(
    name = "mnet",
    version,
    about = "Learned lossless point cloud color codec"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on every .ply file in a directory.
    Train(TrainArgs),
    /// Compress the colors of a point cloud.
    Encode(EncodeArgs),
    /// Reconstruct colors losslessly from geometry and a stream.
    Decode(DecodeArgs),
    /// Reconstruct approximate colors from the first chunks of a stream.
    DecodeScalable(ScalableArgs),
    /// Encode every cloud in a directory and write a CSV report.
    Evaluate(EvaluateArgs),
    /// Run the built-in oracle and invariant checks.
    SelfCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Checkpoint file [default: $MNET_CHECKPOINT_DIR/mnet.ckpt]
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VoxelArgs {
    /// Grid bit depth of the input positions.
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
    /// Worker threads for block-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    data_dir: PathBuf,
    /// Output checkpoint [default: $MNET_CHECKPOINT_DIR/mnet.ckpt]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bit_depth: u32,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 200)]
    epochs: u32,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    patience: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Stop after this many seconds (checked at epoch ends).
    #[arg(long)]
    time_budget: Option<u64>,
    /// Stop once the validation rate reaches this many bits per point.
    #[arg(long)]
    target_bpp: Option<f64>,
    #[arg(long, default_value_t = 3)]
    scales: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    res_blocks: usize,
    #[arg(long, default_value_t = 10)]
    mixtures: usize,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    input: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    voxel: VoxelArgs,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    geometry: PathBuf,
    stream: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    voxel: VoxelArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Mean,
    Sample,
}

#[derive(Args, Debug)]
struct ScalableArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long, value_enum, default_value_t = Mode::Mean)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of chunks to use, 1 (coarsest latents only) to all.
    #[arg(long, default_value_t = 3)]
    chunks: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    dir: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    csv: PathBuf,
    /// Also decode every block and check it matches.
    #[arg(long)]
    verify: bool,
    #[command(flatten)]
    voxel: VoxelArgs,
}

/// Bad flag values found after parsing; reported with exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn default_checkpoint(explicit: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    match std::env::var_os(CHECKPOINT_DIR_ENV) {
        Some(dir) => Ok(Path::new(&dir).join(DEFAULT_CHECKPOINT)),
        None => Err(usage(format!(
            "no checkpoint given and {CHECKPOINT_DIR_ENV} is not set"
        ))),
    }
}

fn load_model(arg: ModelArg) -> anyhow::Result<Model> {
    let path = default_checkpoint(arg.model)?;
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_blocks(path: &Path, bit_depth: u32) -> anyhow::Result<(Vec<Block>, Option<Vec<[u8; 3]>>)> {
    let (positions, colors) =
        read_ply_geometry(path).with_context(|| format!("reading {}", path.display()))?;
    let has_colors = colors.is_some();
    let pc = PointCloud {
        colors: colors.unwrap_or_else(|| vec![[0; 3]; positions.len()]),
        positions,
    };
    let blocks = partition_blocks(&voxelize(&pc, bit_depth)?, BLOCK_SIZE)?;
    let original = has_colors.then(|| blocks.iter().flat_map(Block::colors).collect());
    Ok((blocks, original))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Global positions and colors, blocks in stream order.
fn reconstruct(blocks: &[Block], colors: Vec<Vec<[u8; 3]>>) -> PointCloud {
    let mut pc = PointCloud::default();
    for (b, cs) in blocks.iter().zip(colors) {
        for (c, rgb) in b.coords().iter().zip(cs) {
            let g = Coord3::new(b.origin.x + c.x, b.origin.y + c.y, b.origin.z + c.z);
            pc.positions.push([g.x as f64, g.y as f64, g.z as f64]);
            pc.colors.push(rgb);
        }
    }
    pc
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let out = default_checkpoint(a.out)?;
    let model_config = ModelConfig {
        num_scales: a.scales,
        channels: a.channels,
        res_blocks: a.res_blocks,
        mixtures: a.mixtures,
        ..ModelConfig::default()
    };
    model_config.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        patience: a.patience,
        max_epochs: a.epochs,
        seed: a.seed,
        val_fraction: a.val_fraction,
        threads: a.threads,
        time_budget: a.time_budget.map(Duration::from_secs),
        target_bpp: a.target_bpp,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let clouds = load_dataset(&a.data_dir, a.bit_depth)
        .with_context(|| format!("loading dataset {}", a.data_dir.display()))?;
    let blocks: Vec<Block> = clouds.into_iter().flat_map(|(_, b)| b).collect();
    info!("training on {} blocks", blocks.len());
    let outcome = train(&blocks, model_config, &cfg, |log| {
        info!(
            "epoch {} lr {:.3e} train {:.3} bpp val {:.3} bpp ({:.1} s)",
            log.epoch, log.lr, log.train_bpp, log.val_bpp, log.seconds
        );
    })?;
    checkpoint::save(&outcome.model, &out)?;
    println!(
        "best epoch {} validation {:.2} bpp -> {}",
        outcome.best_epoch,
        outcome.model.metadata.loss,
        out.display()
    );
    Ok(())
}

fn run_encode(a: EncodeArgs) -> anyhow::Result<()> {
    let model = load_model(a.model)?;
    let (blocks, _) = read_blocks(&a.input, a.voxel.bit_depth)?;
    let points: usize = blocks.iter().map(Block::len).sum();
    if points == 0 {
        bail!(mnet::Error::EmptyGeometry);
    }
    let t0 = Instant::now();
    let stream = encode_blocks(&blocks, &model, a.voxel.threads)?;
    let bytes = stream.to_bytes();
    let secs = t0.elapsed().as_secs_f64();
    write_atomic(&a.out, &bytes)?;
    println!("points: {points}");
    println!("bpp: {:.2}", measure_bpp(bytes.len(), points));
    println!("seconds: {secs:.2}");
    Ok(())
}

fn read_stream(path: &Path) -> anyhow::Result<FileStream> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileStream::parse(&bytes)?)
}

fn run_decode(a: DecodeArgs) -> anyhow::Result<()> {
    let model = load_model(a.model)?;
    let (blocks, original) = read_blocks(&a.geometry, a.voxel.bit_depth)?;
    let stream = read_stream(&a.stream)?;
    let geometry: Vec<_> = blocks
        .iter()
        .map(|b| (b.origin, b.coords().to_vec()))
        .collect();
    let colors = decode_blocks(&geometry, &stream, &model, a.voxel.threads)?;
    let pc = reconstruct(&blocks, colors);
    write_ply(&pc, &a.out, PlyFormat::BinaryLittleEndian)?;
    if let Some(orig) = original {
        println!("lossless: {}", orig == pc.colors);
    }
    Ok(())
}

fn run_decode_scalable(a: ScalableArgs) -> anyhow::Result<()> {
    let model = load_model(a.decode.model)?;
    let full = model.config.num_scales + 1;
    if a.chunks == 0 || a.chunks > full {
        return Err(usage(format!("--chunks must be between 1 and {full}")));
    }
    let mode = match a.mode {
        Mode::Mean => ScalableMode::Mean,
        Mode::Sample => ScalableMode::Sample { seed: a.seed },
    };
    let (blocks, _) = read_blocks(&a.decode.geometry, a.decode.voxel.bit_depth)?;
    let stream = read_stream(&a.decode.stream)?;
    if stream.blocks.len() != blocks.len() {
        bail!(mnet::Error::CorruptStream(format!(
            "stream has {} blocks, geometry has {}",
            stream.blocks.len(),
            blocks.len()
        )));
    }
    let mut colors = Vec::with_capacity(blocks.len());
    let mut used = 0usize;
    for (b, (origin, bytes)) in blocks.iter().zip(&stream.blocks) {
        if *origin != b.origin {
            bail!(mnet::Error::CorruptStream(format!(
                "block origin {origin:?} does not match geometry"
            )));
        }
        let prefix = Bitstream::parse(bytes)?.truncated(a.chunks).to_bytes();
        used += prefix.len();
        colors.push(decode_scalable(b.coords(), &prefix, &model, mode)?);
    }
    let points: usize = blocks.iter().map(Block::len).sum();
    let pc = reconstruct(&blocks, colors);
    write_ply(&pc, &a.decode.out, PlyFormat::BinaryLittleEndian)?;
    println!("bpp: {:.2}", measure_bpp(used, points));
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let model = load_model(a.model)?;
    let clouds = load_dataset(&a.dir, a.voxel.bit_depth)
        .with_context(|| format!("loading {}", a.dir.display()))?;
    if clouds.is_empty() {
        bail!(mnet::Error::EmptyDataset);
    }
    let rows = evaluate(&clouds, &model, a.voxel.threads, a.verify)?;
    let csv = report_csv(&rows);
    write_atomic(&a.csv, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn run_self_check(seed: u64) -> anyhow::Result<()> {
    let results = mnet::selfcheck::run(seed);
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {} ({})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Encode(a) => run_encode(a),
        Command::Decode(a) => run_decode(a),
        Command::DecodeScalable(a) => run_decode_scalable(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::SelfCheck { seed } => run_self_check(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!(
                "{}",
                <Cli as clap::CommandFactory>::command().render_usage()
            );
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
