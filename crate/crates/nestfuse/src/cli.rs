//! Command-line surface: `train`, `fuse`, `eval`, and `ablate` subcommands
//! wiring the library into a batch pipeline.
//!
//! Exit codes are a stable contract: 0 success, 2 user error (bad flags,
//! unreadable inputs, mismatched sizes, empty matches), 3 numerical abort
//! (non-finite training loss, SVD failure). Every file write is atomic
//! (temp file + rename). `NESTFUSE_DETERMINISTIC=1` is honored: commands
//! are single-threaded and fully seeded, so runs are reproducible bit for
//! bit; the variable exists to pin that expectation in scripts.

use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::fusion::{fuse_multiscale, FusionError, PoolingKind};
use crate::imgio::{crop_to, load_image, pad_to_multiple, save_image, ImageIoError};
use crate::loss::LossError;
use crate::metrics::{aggregate, evaluate_pair, write_csv, write_csv_with, MetricsError, MetricsReport};
use crate::network::{decode, decode_deep_supervised, encode, NetworkError, NetworkState};
use crate::tensor::FeatureMap;
use crate::train::{train, write_loss_csv, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for invalid input or configuration.
pub const EXIT_USER: i32 = 2;
/// Exit code for numerical failure.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad input or configuration; maps to exit code 2.
    User(String),
    /// Numerical failure; maps to exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanAbort { .. } => CliError::Numerical(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::SvdFailed { .. } => CliError::Numerical(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

macro_rules! user_error_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::User(e.to_string())
            }
        }
    )*};
}
user_error_from!(ImageIoError, CheckpointError, MetricsError, NetworkError, LossError, std::io::Error);

#[derive(Parser)]
#[command(
    name = "nestfuse",
    version,
    about = "Infrared/visible image fusion with a nest-connection autoencoder",
    long_about = "Train a reconstruction autoencoder, fuse image pairs with spatial/channel \
                  attention, evaluate fusion quality, and run ablation grids.\n\n\
                  All commands are deterministic for a fixed seed; NESTFUSE_DETERMINISTIC=1 \
                  asserts that expectation (execution is always single-threaded and seeded)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder on a directory of images
    Train(TrainArgs),
    /// Fuse two images of equal size with a trained checkpoint
    Fuse(FuseArgs),
    /// Score fused images against their source pairs into a CSV report
    Eval(EvalArgs),
    /// Train and evaluate the full lambda x pooling ablation grid
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training images (PNG/JPEG)
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// SSIM weight in the loss (must be > 0)
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Train the three auxiliary decoder heads instead of the main output
    #[arg(long)]
    deep_supervision: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square training resolution, a multiple of 16
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Also write the per-iteration loss history to this CSV
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Write an intermediate checkpoint every N iterations (0 = end only)
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct FuseArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// First source image (e.g. infrared)
    #[arg(long)]
    a: PathBuf,
    /// Second source image (e.g. visible); must match --a in size
    #[arg(long)]
    b: PathBuf,
    /// Fused output image (PNG)
    #[arg(long)]
    out: PathBuf,
    /// Channel-attention pooling: avg, max, or nuclear
    #[arg(long, default_value = "avg")]
    pooling: PoolingKind,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory with ir/ and vis/ subdirectories of source pairs
    #[arg(long)]
    pairs: PathBuf,
    /// Directory of fused images, matched to pairs by filename stem
    #[arg(long)]
    fused: PathBuf,
    /// CSV report output path
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory of training images
    #[arg(long)]
    corpus: PathBuf,
    /// Directory with ir/ and vis/ subdirectories of evaluation pairs
    #[arg(long)]
    pairs: PathBuf,
    /// Comma-separated SSIM weights to train
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
    lambdas: Vec<f64>,
    /// Comma-separated pooling kinds to evaluate
    #[arg(long, value_delimiter = ',', default_value = "avg,max,nuclear")]
    poolings: Vec<PoolingKind>,
    /// Additionally train with deep supervision and report each head
    #[arg(long)]
    deep_supervision: bool,
    /// Lambda used for the deep-supervision training run
    #[arg(long, default_value_t = 100.0)]
    ds_lambda: f64,
    /// Grid CSV output path
    #[arg(long, default_value = "ablation.csv")]
    report: PathBuf,
    /// Square training resolution, a multiple of 16
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where per-cell checkpoints are kept (default: a temp directory)
    #[arg(long)]
    workdir: Option<PathBuf>,
}

/// Parses arguments from the process environment, runs the chosen command,
/// and returns the process exit code.
pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    if std::env::var("NESTFUSE_DETERMINISTIC").as_deref() == Ok("1") {
        log::info!("deterministic mode requested: execution is single-threaded and seeded");
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = TrainConfig::new(&args.corpus);
    config.image_size = args.size;
    config.epochs = args.epochs;
    config.batch_size = args.batch;
    config.lambda = args.lambda;
    config.learning_rate = args.lr;
    config.seed = args.seed;
    config.deep_supervision = args.deep_supervision;
    config.checkpoint_every = args.checkpoint_every;
    config.checkpoint_path = Some(args.out.clone());
    let outcome = train(&config)?;
    if let Some(csv) = &args.loss_csv {
        write_loss_csv(&outcome.history, csv)?;
    }
    let last = outcome.history.last().expect("at least one iteration");
    println!(
        "trained {} iterations (final loss {:.4}); checkpoint at {}",
        outcome.history.len(),
        last.total,
        args.out.display()
    );
    Ok(())
}

/// Pads both sources, encodes, fuses per scale, decodes, and crops back.
fn fuse_images(
    state: &NetworkState,
    a: &FeatureMap,
    b: &FeatureMap,
    pooling: PoolingKind,
) -> Result<FeatureMap, CliError> {
    let (h, w) = (a.height(), a.width());
    let fa = encode(&pad_to_multiple(a), state)?;
    let fb = encode(&pad_to_multiple(b), state)?;
    let fused = fuse_multiscale(&fa, &fb, pooling)?;
    Ok(crop_to(&decode(&fused, state)?, h, w))
}

/// Deep-supervision variant of [`fuse_images`]: one fused image per head.
fn fuse_images_deep(
    state: &NetworkState,
    a: &FeatureMap,
    b: &FeatureMap,
    pooling: PoolingKind,
) -> Result<[FeatureMap; 3], CliError> {
    let (h, w) = (a.height(), a.width());
    let fa = encode(&pad_to_multiple(a), state)?;
    let fb = encode(&pad_to_multiple(b), state)?;
    let fused = fuse_multiscale(&fa, &fb, pooling)?;
    let outs = decode_deep_supervised(&fused, state)?;
    Ok(outs.map(|o| crop_to(&o, h, w)))
}

fn cmd_fuse(args: FuseArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&args.ckpt)?;
    if state.has_heads() {
        log::warn!(
            "checkpoint {} carries deep-supervision heads; fusion uses the main output and ignores them",
            args.ckpt.display()
        );
    }
    let a = load_image(&args.a)?;
    let b = load_image(&args.b)?;
    if a.shape() != b.shape() {
        return Err(CliError::User(format!(
            "input sizes differ: {} is {}x{}, {} is {}x{}",
            args.a.display(),
            a.height(),
            a.width(),
            args.b.display(),
            b.height(),
            b.width()
        )));
    }
    let fused = fuse_images(&state, &a, &b, args.pooling)?;
    save_image(&fused, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Maps filename stem → path for every PNG/JPEG directly in `dir`.
fn image_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::User(format!("cannot list {}: {e}", dir.display())))?;
    let mut stems = BTreeMap::new();
    for entry in entries.flatten() {
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| {
                let e = e.to_ascii_lowercase();
                e == "png" || e == "jpg" || e == "jpeg"
            })
            .unwrap_or(false);
        if !is_image {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(previous) = stems.insert(stem.to_string(), path.clone()) {
            log::warn!(
                "stem {stem} appears twice ({} and {}); using {}",
                previous.display(),
                path.display(),
                path.display()
            );
        }
    }
    Ok(stems)
}

/// Loads the ir/vis pair directories and returns the stems present in both,
/// reporting (and skipping) stems that appear on only one side.
fn matched_pairs(
    pairs_dir: &Path,
) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let ir = image_stems(&pairs_dir.join("ir"))?;
    let vis = image_stems(&pairs_dir.join("vis"))?;
    let mut matched = Vec::new();
    for (stem, ir_path) in &ir {
        if let Some(vis_path) = vis.get(stem) {
            matched.push((stem.clone(), ir_path.clone(), vis_path.clone()));
        }
    }
    let unmatched: Vec<&str> = ir
        .keys()
        .filter(|s| !vis.contains_key(*s))
        .chain(vis.keys().filter(|s| !ir.contains_key(*s)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        eprintln!("skipping stems missing an ir/vis counterpart: {}", unmatched.join(", "));
    }
    Ok(matched)
}

fn load_pair(
    stem: &str,
    ir_path: &Path,
    vis_path: &Path,
) -> Result<(FeatureMap, FeatureMap), CliError> {
    let ir = load_image(ir_path)?;
    let vis = load_image(vis_path)?;
    if ir.shape() != vis.shape() {
        return Err(CliError::User(format!(
            "pair {stem}: ir is {}x{} but vis is {}x{}",
            ir.height(),
            ir.width(),
            vis.height(),
            vis.width()
        )));
    }
    Ok((ir, vis))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let pairs = matched_pairs(&args.pairs)?;
    let fused = image_stems(&args.fused)?;
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    let mut unmatched = Vec::new();
    for (stem, ir_path, vis_path) in &pairs {
        let Some(fused_path) = fused.get(stem) else {
            unmatched.push(stem.as_str());
            continue;
        };
        let (ir, vis) = load_pair(stem, ir_path, vis_path)?;
        let fused_img = load_image(fused_path)?;
        let report = evaluate_pair(&fused_img, &ir, &vis)
            .map_err(|e| e.for_pair(stem.clone()))?;
        rows.push((stem.clone(), report));
    }
    if !unmatched.is_empty() {
        eprintln!("skipping pairs with no fused image: {}", unmatched.join(", "));
    }
    if rows.is_empty() {
        return Err(CliError::User(format!(
            "no fused image in {} matches a pair stem in {}",
            args.fused.display(),
            args.pairs.display()
        )));
    }
    write_csv(&rows, &args.report)?;
    println!(
        "wrote {} pair rows + AVERAGE to {}",
        rows.len(),
        args.report.display()
    );
    Ok(())
}

fn format_lambda(lambda: f64) -> String {
    if lambda.fract() == 0.0 && lambda.abs() < 1e12 {
        format!("{}", lambda as i64)
    } else {
        format!("{lambda}")
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    if args.lambdas.is_empty() || args.poolings.is_empty() {
        return Err(CliError::User(
            "--lambdas and --poolings must each name at least one value".into(),
        ));
    }
    let pair_paths = matched_pairs(&args.pairs)?;
    if pair_paths.is_empty() {
        return Err(CliError::User(format!(
            "no matched ir/vis pairs under {}",
            args.pairs.display()
        )));
    }
    let mut pairs = Vec::with_capacity(pair_paths.len());
    for (stem, ir_path, vis_path) in &pair_paths {
        pairs.push((stem.clone(), load_pair(stem, ir_path, vis_path)?));
    }

    let temp_guard;
    let workdir = match &args.workdir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.clone()
        }
        None => {
            temp_guard = tempfile::tempdir()?;
            temp_guard.path().to_path_buf()
        }
    };

    let base_config = |lambda: f64, deep: bool, name: &str| {
        let mut c = TrainConfig::new(&args.corpus);
        c.image_size = args.size;
        c.epochs = args.epochs;
        c.batch_size = args.batch;
        c.lambda = lambda;
        c.learning_rate = args.lr;
        c.seed = args.seed;
        c.deep_supervision = deep;
        c.checkpoint_path = Some(workdir.join(name));
        c
    };

    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for &lambda in &args.lambdas {
        let name = format!("plain_lambda{}.nf", format_lambda(lambda));
        log::info!("ablation: training lambda={}", format_lambda(lambda));
        let outcome = train(&base_config(lambda, false, &name))?;
        for &pooling in &args.poolings {
            let mut reports = Vec::with_capacity(pairs.len());
            for (stem, (ir, vis)) in &pairs {
                let fused = fuse_images(&outcome.state, ir, vis, pooling)?;
                reports.push(
                    evaluate_pair(&fused, ir, vis).map_err(|e| e.for_pair(stem.clone()))?,
                );
            }
            let cell = aggregate(&reports).expect("pairs is non-empty");
            rows.push((format!("lambda{}_{pooling}", format_lambda(lambda)), cell));
        }
    }

    if args.deep_supervision {
        log::info!(
            "ablation: training deep-supervision variant at lambda={}",
            format_lambda(args.ds_lambda)
        );
        let outcome = train(&base_config(args.ds_lambda, true, "deep_supervision.nf"))?;
        for &pooling in &args.poolings {
            let mut per_head: [Vec<MetricsReport>; 3] = Default::default();
            for (stem, (ir, vis)) in &pairs {
                let outputs = fuse_images_deep(&outcome.state, ir, vis, pooling)?;
                for (head, fused) in per_head.iter_mut().zip(&outputs) {
                    head.push(
                        evaluate_pair(fused, ir, vis).map_err(|e| e.for_pair(stem.clone()))?,
                    );
                }
            }
            for (q, head) in per_head.iter().enumerate() {
                let cell = aggregate(head).expect("pairs is non-empty");
                rows.push((format!("O{}_{pooling}", q + 1), cell));
            }
        }
    }

    write_csv_with("cell", &rows, &args.report)?;
    println!(
        "wrote ablation grid ({} cells x 7 metrics) to {}",
        rows.len(),
        args.report.display()
    );
    Ok(())
}
