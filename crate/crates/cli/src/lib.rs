//! Command-line front end: dataset generation, training, single-patch
//! estimation and grouped evaluation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};

use qmat_core::dataset::{
    check_disjoint_sources, generate_dataset_at, ingest_image, list_images, read_patch_png,
    read_shards, synthetic::synthetic_image, write_shard, DatasetManifest, PatchRecord, Split,
};
use qmat_core::estimator::estimate;
use qmat_core::harness::{emit_outputs, mismatch_eval, ExperimentConfig};
use qmat_core::jpeg::PixelImage;
use qmat_core::nn::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Checkpoint, DenseNet,
    DenseNetConfig, LossKind, Tensor, TrainConfig,
};

/// Exit status for malformed or invalid arguments.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for failures after validation succeeded.
pub const EXIT_RUNTIME: i32 = 1;

/// Shard file extension.
pub const SHARD_EXT: &str = "qmds";

/// Source images decoded and processed together by `generate`.
const IMAGE_CHUNK: usize = 16;

#[derive(Debug, Parser)]
#[command(
    name = "qmat",
    version,
    about = "Estimate the primary quantization matrix of double-compressed JPEG patches"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Double-compress source images and write labelled patch shards.
    Generate(GenerateArgs),
    /// Train the regressor on patch shards.
    Train(TrainArgs),
    /// Estimate the quantization steps of one 64×64 PNG patch.
    Estimate(EstimateArgs),
    /// Evaluate a checkpoint on patch shards and write CSV tables and a plot.
    Evaluate(EvaluateArgs),
}

fn quality(s: &str) -> Result<u8, String> {
    match s.trim().parse::<u8>() {
        Ok(q) if (1..=100).contains(&q) => Ok(q),
        _ => Err(format!("quality factor {s:?} is not an integer in [1, 100]")),
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory of lossless PNG or TIFF source images.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input_dir: Option<PathBuf>,
    /// Use this many procedurally generated source images instead.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub synthetic: Option<u32>,
    /// Side of the synthetic images in pixels.
    #[arg(long, default_value_t = 256, requires = "synthetic", value_parser = clap::value_parser!(u32).range(72..=8192))]
    pub synthetic_size: u32,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: String,
    #[arg(long, value_parser = quality)]
    pub qf2: u8,
    /// Comma-separated first-compression quality factors.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true, value_parser = quality)]
    pub qf1_grid: Vec<u8>,
    /// Patches per (image, qf1) in the train and val splits.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    pub cap: u32,
    /// Patches per (image, qf1) in the test split.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub test_cap: u32,
    /// Leading zig-zag steps stored as labels.
    #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u8).range(1..=64))]
    pub nc: u8,
    /// Records per shard file.
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u32).range(1..))]
    pub shard_records: u32,
    /// Output directory for the shards.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training shard files or directories of shards.
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
    /// Validation shard files or directories of shards.
    #[arg(long, num_args = 1..)]
    pub val: Vec<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch: u32,
    /// logcosh or l2.
    #[arg(long, default_value = "logcosh", value_parser = ["logcosh", "l2"])]
    pub loss: String,
    /// Network depth, of the form 3L + 4.
    #[arg(long, default_value_t = 40, conflicts_with_all = ["small", "warm_start"])]
    pub depth: usize,
    /// Growth rate.
    #[arg(long, default_value_t = 12, conflicts_with_all = ["small", "warm_start"])]
    pub growth: usize,
    /// Depth 16, growth rate 8.
    #[arg(long, conflicts_with = "warm_start")]
    pub small: bool,
    #[arg(long, default_value_t = 0.2, conflicts_with = "warm_start")]
    pub dropout: f64,
    /// Start from this checkpoint's weights with a fresh optimizer.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of per-epoch losses.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// 64×64 PNG patch.
    #[arg(long)]
    pub patch: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test shard files or directories of shards.
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
    /// Output directory for eval.csv, per_coeff.csv and per_coeff.svg.
    #[arg(long)]
    pub out: PathBuf,
    /// Pool aligned and non-aligned patches into one row per quality.
    #[arg(long)]
    pub no_align_split: bool,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch: u32,
}

/// Failure classified by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn log_level() -> Result<LevelFilter, Failure> {
    match std::env::var("QMAT_LOG").as_deref() {
        Err(_) | Ok("info") => Ok(LevelFilter::Info),
        Ok("quiet") => Ok(LevelFilter::Off),
        Ok("debug") => Ok(LevelFilter::Debug),
        Ok(other) => usage(format!(
            "QMAT_LOG must be quiet, info or debug, not {other:?}"
        )),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let level = log_level()?;
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    if let Some(n) = cli.threads {
        // A pool built earlier in the same process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(n))
            .build_global();
    }
    match cli.command {
        Command::Generate(a) => generate(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{what} {} does not exist", path.display()))
    }
}

/// Expands directories to the shard files they contain, sorted by name.
fn shard_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == SHARD_EXT))
                .collect();
            if found.is_empty() {
                return usage(format!("no .{SHARD_EXT} files in {}", p.display()));
            }
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return usage(format!("shard path {} does not exist", p.display()));
        }
    }
    Ok(out)
}

/// Most frequent second-pass quality among `records`, smallest on ties.
fn dominant_qf2(records: &[PatchRecord]) -> Option<u8> {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.qf2).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(q, n)| (n, std::cmp::Reverse(q)))
        .map(|(q, _)| q)
}

fn generate(a: GenerateArgs, seed: u64) -> Result<(), Failure> {
    let split: Split = a.split.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
    let manifest = DatasetManifest {
        patches_per_image_cap: a.cap as usize,
        patches_per_image_test: a.test_cap as usize,
        nc: usize::from(a.nc),
        ..DatasetManifest::new(split, a.qf2, a.qf1_grid.clone(), seed)
    };
    manifest
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    enum Source {
        Files(Vec<PathBuf>),
        Synthetic(u32, usize),
    }
    let source = match (&a.input_dir, a.synthetic) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return usage(format!("input directory {} does not exist", dir.display()));
            }
            let files = list_images(dir).map_err(anyhow::Error::from)?;
            if files.is_empty() {
                return usage(format!("no images in {}", dir.display()));
            }
            Source::Files(files)
        }
        (None, Some(n)) => Source::Synthetic(n, a.synthetic_size as usize),
        (None, None) => return usage("either --input-dir or --synthetic is required"),
    };
    let total = match &source {
        Source::Files(f) => f.len(),
        Source::Synthetic(n, _) => *n as usize,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let load = |i: usize| -> anyhow::Result<(String, PixelImage)> {
        match &source {
            Source::Files(files) => {
                let p = &files[i];
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("image{i}"));
                Ok((id, ingest_image(p)?))
            }
            Source::Synthetic(_, side) => {
                let img_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
                Ok((format!("syn{seed}-{i}"), synthetic_image(*side, *side, img_seed)))
            }
        }
    };

    let mut pending: Vec<PatchRecord> = Vec::new();
    let mut shard_index = 0usize;
    let mut written = 0usize;
    let mut flush = |records: &mut Vec<PatchRecord>, all: bool| -> anyhow::Result<()> {
        while records.len() >= a.shard_records as usize || (all && !records.is_empty()) {
            let take = records.len().min(a.shard_records as usize);
            let rest = records.split_off(take);
            let path = a
                .out
                .join(format!("{}-{shard_index:04}.{SHARD_EXT}", a.split));
            write_shard(records, &path)?;
            info!("wrote {} records to {}", records.len(), path.display());
            written += records.len();
            shard_index += 1;
            *records = rest;
        }
        Ok(())
    };
    for start in (0..total).step_by(IMAGE_CHUNK) {
        let end = (start + IMAGE_CHUNK).min(total);
        let images = (start..end).map(load).collect::<anyhow::Result<Vec<_>>>()?;
        let records = generate_dataset_at(&images, &manifest, start as u64)
            .context("generating patches")?;
        info!("images {}..{end} of {total}: {} patches", start + 1, records.len());
        pending.extend(records);
        flush(&mut pending, false)?;
    }
    flush(&mut pending, true)?;
    if shard_index == 0 {
        return Err(anyhow::anyhow!("no patches were produced").into());
    }
    info!("{written} records in {shard_index} shard(s)");
    Ok(())
}

fn train(a: TrainArgs, seed: u64) -> Result<(), Failure> {
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return usage(format!("learning rate must be positive, got {}", a.lr));
    }
    if !(0.0..1.0).contains(&a.dropout) {
        return usage(format!("dropout must lie in [0, 1), got {}", a.dropout));
    }
    let loss: LossKind = a.loss.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
    let arch = if a.small {
        Some(DenseNetConfig::small())
    } else if a.warm_start.is_none() {
        Some(DenseNetConfig::with_depth(a.depth, a.growth).map_err(|e| Failure::Usage(e.to_string()))?)
    } else {
        None
    };
    if let Some(w) = &a.warm_start {
        require_file(w, "warm-start checkpoint")?;
    }
    let train_paths = shard_paths(&a.shards)?;
    let val_paths = shard_paths(&a.val)?;

    let train_set = read_shards(&train_paths).context("reading training shards")?;
    let val_set = if val_paths.is_empty() {
        None
    } else {
        let v = read_shards(&val_paths).context("reading validation shards")?;
        check_disjoint_sources(&train_set, &v).context("training and validation sets")?;
        Some(v)
    };
    let nc = train_set[0].nc();

    let (mut model, base_epoch) = match (&a.warm_start, arch) {
        (Some(path), _) => {
            let ck = load_checkpoint(path).context("loading warm-start checkpoint")?;
            info!("warm start from {} (epoch {})", path.display(), ck.epoch);
            (ck.model, ck.epoch)
        }
        (None, Some(cfg)) => {
            let cfg = DenseNetConfig {
                nc_outputs: nc,
                dropout_rate: a.dropout,
                ..cfg
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            (DenseNet::new(cfg, seed).context("building network")?, 0)
        }
        (None, None) => unreachable!("architecture is chosen unless warm starting"),
    };
    info!(
        "{} training patches, {} parameters",
        train_set.len(),
        model.param_count()
    );
    let trained_qf2 = dominant_qf2(&train_set);
    let param_refs: Vec<&Tensor<f32>> = model.params().iter().map(|p| &p.value).collect();
    let mut optimizer = AdamState::for_params(&param_refs);
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch as usize,
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        loss,
        // Shuffling and dropout draw from a stream separate from initialization.
        seed: seed.wrapping_add(1),
        ..TrainConfig::default()
    };
    let mut history = match &a.history {
        Some(p) => {
            let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "epoch,train_loss,val_loss").context("writing history")?;
            Some(f)
        }
        None => None,
    };
    let out = a.out.clone();
    let save = |model: &DenseNet<f32>, opt: &AdamState, epoch: u32| {
        save_checkpoint(
            &Checkpoint {
                model: model.clone(),
                epoch,
                trained_qf2,
                optimizer: Some(opt.clone()),
            },
            &out,
        )
    };
    if a.epochs == 0 {
        save(&model, &optimizer, base_epoch).context("writing checkpoint")?;
        return Ok(());
    }
    let report = qmat_core::nn::train(
        &mut model,
        &mut optimizer,
        &train_set,
        val_set.as_deref(),
        &config,
        |stats, m, opt| {
            if let Some(f) = history.as_mut() {
                let val = stats.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
                writeln!(f, "{},{:.9},{val}", base_epoch as usize + stats.epoch, stats.train_loss)
                    .map_err(|e| qmat_core::nn::NnError::Checkpoint(e.to_string()))?;
            }
            save(m, opt, base_epoch + stats.epoch as u32)
        },
    )
    .context("training")?;
    info!(
        "finished {} epochs ({} steps); checkpoint at {}",
        report.epochs.len(),
        report.steps,
        a.out.display()
    );
    Ok(())
}

fn estimate_cmd(a: EstimateArgs) -> Result<(), Failure> {
    require_file(&a.model, "model checkpoint")?;
    require_file(&a.patch, "patch")?;
    let ck = load_checkpoint(&a.model).context("loading checkpoint")?;
    let pixels = read_patch_png(&a.patch).context("reading patch")?;
    let est = estimate(&ck.model, &pixels).context("estimating")?;
    let ints: Vec<String> = est.rounded.iter().map(u16::to_string).collect();
    let raw: Vec<String> = est.raw.iter().map(|v| format!("{v:.4}")).collect();
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", ints.join(" ")).context("writing output")?;
    writeln!(stdout, "raw (zig-zag order): {}", raw.join(" ")).context("writing output")?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    require_file(&a.model, "model checkpoint")?;
    let shards = shard_paths(&a.shards)?;
    let config = ExperimentConfig {
        align_split: !a.no_align_split,
        output_dir: None,
        batch_size: a.batch as usize,
        ..ExperimentConfig::new(a.model.clone(), shards)
    };
    let table = mismatch_eval(&config).context("evaluating")?;
    emit_outputs(&table, &a.out).context("writing outputs")?;
    let mut stdout = std::io::stdout().lock();
    if let Some((trained, tested)) = table.annotation {
        let trained = trained.map_or("unknown".to_string(), |q| q.to_string());
        writeln!(stdout, "QF2 train {trained}, test {tested}").context("writing output")?;
    }
    writeln!(stdout, "{:>4} {:>12} {:>10} {:>8} {:>8}", "qf1", "alignment", "mse", "acc", "n")
        .context("writing output")?;
    for r in table.rows() {
        writeln!(
            stdout,
            "{:>4} {:>12} {:>10.4} {:>8.4} {:>8}",
            r.qf1,
            r.alignment.label(),
            r.mse,
            r.acc,
            r.n
        )
        .context("writing output")?;
    }
    if let Some((mse, acc)) = table.pooled() {
        writeln!(stdout, "pooled: mse {mse:.4}, acc {acc:.4}, n {}", table.total_count())
            .context("writing output")?;
    }
    Ok(())
}
