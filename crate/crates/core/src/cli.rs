//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing, unreadable or corrupt input), 3 a verification check failed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::gradcheck_suite;
use crate::degrade::{degrade_sampled, synth_pair_with, Preset, SynthOptions, DEFAULT_MAX_DEPTH};
use crate::error::{Error, Result};
use crate::generator::{compress, decompress, GeneratorModel, LatentCode};
use crate::metrics::{evaluate, EvalItem, MetricOptions, MetricSet};
use crate::pipeline::image::is_image_path;
use crate::pipeline::{
    load_dataset, load_image, load_image_resized, run_training, save_image, synthetic_samples, Checkpoint,
    ModelPreset, TrainConfig,
};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CVGAN_THREADS";

/// File extension of latent codes written by `compress`.
pub const LATENT_EXT: &str = "cvl";

#[derive(Debug, Parser)]
#[command(name = "cvgan", version, about = "Capsule-quantized image enhancement and compression")]
pub struct Cli {
    /// key=value configuration file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model scale.
    #[arg(long, global = true, value_parser = parse_preset)]
    pub preset: Option<ModelPreset>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Train without the gradient-difference term.
    #[arg(long, global = true)]
    pub without_gdl: bool,
    /// Comma-separated subset of psnr,uciqe,uiqm,edge.
    #[arg(long, global = true)]
    pub metrics: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_preset(s: &str) -> std::result::Result<ModelPreset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WaterType {
    Bluish,
    Greenish,
    Hazy,
}

impl From<WaterType> for Preset {
    fn from(w: WaterType) -> Preset {
        match w {
            WaterType::Bluish => Preset::Bluish,
            WaterType::Greenish => Preset::Greenish,
            WaterType::Hazy => Preset::Hazy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a paired dataset (`clean/`, `degraded/`) from procedural or existing images.
    Degrade(DegradeArgs),
    /// Train on a paired dataset directory or on synthetic pairs.
    Train(TrainArgs),
    /// Run the generator over images.
    Enhance(ModelIoArgs),
    /// Write the latent code of each image.
    Compress(ModelIoArgs),
    /// Decode latent codes to images.
    Decompress(ModelIoArgs),
    /// Score images, optionally against references with matching names.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks at the chosen preset.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Generate this many procedural pairs.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: Option<usize>,
    /// Directory of clean images to degrade.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bluish")]
    pub water: WaterType,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    pub max_depth: f64,
    #[arg(long, value_enum, default_value = "png")]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with `degraded/` and `clean/`.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many in-memory synthetic pairs instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Start from the weights of another checkpoint (e.g. a pretraining run).
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelIoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A file or a directory of files.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Images under test: a file or a directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of reference images matched by file stem.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Class probabilities for the Inception Score, one whitespace-separated row per image.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub splits: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|&n| n > 0)
}

fn configure_threads() {
    if let Some(n) = env_threads() {
        // Fails only if a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Degrade(a) => cmd_degrade(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Enhance(a) => cmd_enhance(cli, a),
        Command::Compress(a) => cmd_compress(cli, a),
        Command::Decompress(a) => cmd_decompress(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Gradcheck => cmd_gradcheck(cli),
    }
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Files under `input` (or `input` itself) accepted by `keep`, sorted by name.
fn collect_files(input: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(input, e))?.path();
        if p.is_file() && keep(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Merges the config file with command-line overrides.
pub fn resolve_train_config(cli: &Cli, steps: Option<u64>) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(p) => TrainConfig::from_kv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::for_preset(cli.preset.unwrap_or_default()),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(p) = cli.preset {
        config.preset = p;
    }
    if cli.without_gdl {
        config.without_gdl = true;
    }
    if let Some(n) = steps {
        config.max_steps = Some(n);
    }
    if let Some(n) = env_threads() {
        config.threads = n;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_degrade(cli: &Cli, a: &DegradeArgs) -> Result<i32> {
    let out = out_dir(cli, "dataset")?;
    let seed = cli.seed.unwrap_or(0);
    let preset = Preset::from(a.water);
    let (clean_dir, degraded_dir) = (out.join("clean"), out.join("degraded"));
    for d in [&clean_dir, &degraded_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let ext = a.format.ext();
    let write = |name: &str, clean: &Tensor<f32>, degraded: &Tensor<f32>| -> Result<()> {
        save_image(clean_dir.join(format!("{name}.{ext}")), clean)?;
        save_image(degraded_dir.join(format!("{name}.{ext}")), degraded)
    };
    let count = match (a.synthetic, &a.input) {
        (Some(n), _) => {
            let opts = SynthOptions {
                preset,
                size: (a.size, a.size),
                max_depth: a.max_depth,
            };
            for i in 0..n {
                let (clean, degraded) = synth_pair_with(seed + i as u64, &opts);
                write(&format!("pair_{i:05}"), &clean, &degraded)?;
            }
            n
        }
        (None, Some(dir)) => {
            let files = collect_files(dir, is_image_path)?;
            for (i, f) in files.iter().enumerate() {
                let clean = load_image(f)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
                let degraded = degrade_sampled(&clean, preset, a.max_depth, &mut rng);
                write(&stem(f), &clean, &degraded)?;
            }
            files.len()
        }
        (None, None) => return Err(Error::Config("degrade needs --synthetic N or --input DIR".into())),
    };
    log::info!("wrote {count} {} pairs to {}", preset.name(), out.display());
    println!("{count} pairs written to {}", out.display());
    Ok(EXIT_OK)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let config = resolve_train_config(cli, a.steps)?;
    let extent = config.generator_config().extent;
    let samples = match (&a.data, a.synthetic) {
        (Some(root), _) => {
            let ds = load_dataset(root, extent, config.seed)?;
            for s in &ds.skipped {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
            }
            if ds.is_empty() {
                return Err(Error::Format(format!("no matched pairs under {}", root.display())));
            }
            ds.load_samples()?
        }
        (None, Some(n)) => synthetic_samples(n, config.seed, extent, &Preset::ALL),
        (None, None) => return Err(Error::Config("train needs --data DIR or --synthetic N".into())),
    };
    let out = out_dir(cli, "run")?;
    let (trainer, outcome) = match &a.init {
        Some(init) => {
            let ck = Checkpoint::load(init)?;
            crate::pipeline::run_training_from(config, &samples, &out, |t| ck.load_weights(t))?
        }
        None => run_training(config, &samples, &out, a.resume)?,
    };
    if let Some(last) = outcome.history.last() {
        println!(
            "step {} rec {:.6} gdl {:.6} lambda {:.4} total {:.6}",
            trainer.step, last.losses.rec, last.losses.gdl, last.losses.lambda, last.losses.total
        );
    }
    println!("checkpoint {}", outcome.checkpoint_path.display());
    Ok(EXIT_OK)
}

fn load_model(cli: &Cli, path: &Path) -> Result<GeneratorModel<f32>> {
    let ck = Checkpoint::load(path)?;
    let config = ck.train_config()?;
    if let Some(p) = cli.preset {
        if p != config.preset {
            return Err(Error::Config(format!(
                "checkpoint {} holds a {} model, --preset asked for {}",
                path.display(),
                config.preset.name(),
                p.name()
            )));
        }
    }
    ck.generator()
}

fn cmd_enhance(cli: &Cli, a: &ModelIoArgs) -> Result<i32> {
    let model = load_model(cli, &a.checkpoint)?;
    let out = out_dir(cli, "enhanced")?;
    let files = collect_files(&a.input, is_image_path)?;
    for f in &files {
        let y = load_image_resized(f, model.config.extent)?;
        save_image(out.join(format!("{}.png", stem(f))), &model.generate(&y)?)?;
    }
    println!("{} images enhanced into {}", files.len(), out.display());
    Ok(EXIT_OK)
}

fn cmd_compress(cli: &Cli, a: &ModelIoArgs) -> Result<i32> {
    let model = load_model(cli, &a.checkpoint)?;
    let out = out_dir(cli, "latents")?;
    let files = collect_files(&a.input, is_image_path)?;
    for f in &files {
        let y = load_image_resized(f, model.config.extent)?;
        compress(&model, &y)?.write(out.join(format!("{}.{LATENT_EXT}", stem(f))))?;
    }
    println!("{} latent codes written to {}", files.len(), out.display());
    Ok(EXIT_OK)
}

fn cmd_decompress(cli: &Cli, a: &ModelIoArgs) -> Result<i32> {
    let model = load_model(cli, &a.checkpoint)?;
    let out = out_dir(cli, "decompressed")?;
    let files = collect_files(&a.input, |p| p.extension().is_some_and(|e| e == LATENT_EXT))?;
    for f in &files {
        let code = LatentCode::read(f)?;
        save_image(out.join(format!("{}.png", stem(f))), &decompress(&model.decompressor, &code)?)?;
    }
    println!("{} images decoded into {}", files.len(), out.display());
    Ok(EXIT_OK)
}

/// Whitespace-separated probability rows, `#` comments allowed.
pub fn read_probabilities(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("{}: bad number {v:?}", path.display()))))
                .collect()
        })
        .collect()
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<i32> {
    let set: MetricSet = match &cli.metrics {
        Some(m) => m.parse()?,
        None => MetricSet::ALL,
    };
    let files = collect_files(&a.input, is_image_path)?;
    let references = match &a.reference {
        Some(dir) => collect_files(dir, is_image_path)?,
        None => Vec::new(),
    };
    let mut items = Vec::with_capacity(files.len());
    for f in &files {
        let image = load_image(f)?;
        let reference = match references.iter().find(|r| stem(r) == stem(f)) {
            Some(r) => Some(load_image_resized(r, (image.shape()[1], image.shape()[2]))?),
            None => {
                if set.psnr || set.edge {
                    log::warn!("{}: no reference image, psnr and edge_l2 unavailable", f.display());
                }
                None
            }
        };
        items.push(EvalItem {
            path: f.display().to_string(),
            image,
            reference,
        });
    }
    let mut report = evaluate(&items, set, &MetricOptions::default())?;
    if let Some(p) = &a.probs {
        report = report.with_inception(&read_probabilities(p)?, a.splits)?;
    }
    let out = out_dir(cli, "metrics")?;
    report.write(&out)?;
    print!("{}", report.to_table());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cli: &Cli) -> Result<i32> {
    let preset = cli.preset.unwrap_or(ModelPreset::Desk);
    let outcomes = gradcheck_suite(preset, cli.seed.unwrap_or(0))?;
    let mut worst: f64 = 0.0;
    for o in &outcomes {
        worst = worst.max(o.report.max_rel_error);
        println!(
            "{} {}: max rel err {:.3e} over {} coords (tol {:.0e})",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.report.max_rel_error,
            o.report.checked,
            o.tolerance
        );
    }
    println!("max rel err {worst:.3e}");
    Ok(if outcomes.iter().all(|o| o.passed()) { EXIT_OK } else { EXIT_CHECK })
}
