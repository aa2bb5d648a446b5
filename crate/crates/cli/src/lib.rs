//! The `parsegrid` command line: train, eval, infer, ablate, gradcheck and
//! synth, all driven by one flat config file.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use parsegrid_core::data::{load_lip_dir, pnm, render_labels, LipDataset, Normalization, SampleSource, SynthDataset};
use parsegrid_core::evaluator::{evaluate, flip_tta, run_ablation, AblationJob, EvalOptions, Segmenter};
use parsegrid_core::gradsuite::{run_suite, SuiteScale};
use parsegrid_core::model::Model;
use parsegrid_core::tensor::{argmax_channels, Tape, Tensor};
use parsegrid_core::trainer::{load_checkpoint, train, TrainJob};

pub use config::{ConfigError, DataSource, RunConfig, Split, KEYS};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "PARSEGRID_SEED";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or inputs; exit code 1.
    Config(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<parsegrid_core::Error> for CliError {
    fn from(e: parsegrid_core::Error) -> Self {
        use parsegrid_core::data::DataError;
        match &e {
            parsegrid_core::Error::Config(_)
            | parsegrid_core::Error::Data(DataError::MissingPath(_) | DataError::Classes(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<parsegrid_core::data::DataError> for CliError {
    fn from(e: parsegrid_core::data::DataError) -> Self {
        parsegrid_core::Error::from(e).into()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "parsegrid",
    version,
    about = "Human parsing with an encoder / ASPP / decoder / Smooth network",
    after_help = "Any config key can be overridden with --section.key=value, e.g. --model.base_width=32.\n\
                  PARSEGRID_SEED overrides train.seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (overrides run.workers).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Flip test-time augmentation (sets eval.tta).
    #[arg(long, global = true)]
    tta: bool,
    /// Shorthand for --train.epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    /// Primitive operations only.
    Ops,
    /// Primitives and the end-to-end network.
    Default,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, metrics.jsonl and effective.cfg.
    Train,
    /// Score a checkpoint on a dataset split.
    Eval {
        /// Defaults to <output.dir>/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train or val (overrides eval.split).
        #[arg(long)]
        split: Option<String>,
    },
    /// Predict label maps for P6 images.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <output.dir>/infer.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and score the five ablation variants.
    Ablate,
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "default")]
        scale: Scale,
    },
    /// Write a synthetic dataset directory.
    Synth {
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Classes including background, 2..=20.
        #[arg(long)]
        k: usize,
        /// Output directory (images/, labels/, splits/train.txt).
        #[arg(long)]
        out: PathBuf,
        /// Canvas HxW (defaults to data.synth_hw).
        #[arg(long)]
        hw: Option<String>,
        /// First sample seed (defaults to PARSEGRID_SEED, then data.synth_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap handles.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(s) = a.to_str() {
            if let Some((key, value)) = s.strip_prefix("--").and_then(|kv| kv.split_once('=')) {
                if key.contains('.') {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn effective_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("train.seed", &seed, SEED_ENV)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v, "command line")?;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    if cli.tta {
        cfg.eval_tta = true;
    }
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let (args, overrides) = split_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    let cfg = effective_config(cli, overrides)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, split } => {
            let mut cfg = cfg;
            if let Some(s) = split {
                cfg.set("eval.split", s, "--split")?;
            }
            cmd_eval(&cfg, checkpoint.as_deref())
        }
        Command::Infer {
            checkpoint,
            out,
            images,
        } => cmd_infer(&cfg, checkpoint.as_deref(), out.as_deref(), images),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Gradcheck { scale } => cmd_gradcheck(&cfg, *scale),
        Command::Synth {
            count,
            k,
            out,
            hw,
            seed,
        } => {
            let mut cfg = cfg;
            if let Some(hw) = hw {
                cfg.set("data.synth_hw", hw, "--hw")?;
            }
            let seed = match (seed, std::env::var(SEED_ENV)) {
                (Some(s), _) => *s,
                (None, Ok(s)) => s
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}: {s:?} is not an unsigned integer")))?,
                (None, Err(_)) => cfg.data.synth_seed,
            };
            cmd_synth(seed, *count, *k, cfg.data.synth_hw, out)
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))
}

type Source = Box<dyn SampleSource>;

/// Training split and, when present, the validation split.
fn datasets(cfg: &RunConfig) -> Result<(Source, Option<Source>), CliError> {
    let k = cfg.model.num_classes;
    match cfg.data.source {
        DataSource::Synth => {
            let d = &cfg.data;
            let train = SynthDataset::new(d.synth_seed, d.synth_count, k, d.synth_hw)?;
            let val = if d.synth_val_count > 0 {
                let seed = d.synth_seed.wrapping_add(d.synth_count as u64);
                Some(Box::new(SynthDataset::new(seed, d.synth_val_count, k, d.synth_hw)?) as Source)
            } else {
                None
            };
            Ok((Box::new(train), val))
        }
        DataSource::Dir => {
            let root = cfg.data.root.as_ref().expect("validated");
            let index = load_lip_dir(root)?;
            let train = LipDataset::new(&index, "train", k)?;
            let val = if index.val.is_empty() {
                None
            } else {
                Some(Box::new(LipDataset::new(&index, "val", k)?) as Source)
            };
            Ok((Box::new(train), val))
        }
    }
}

fn split_source(cfg: &RunConfig) -> Result<Source, CliError> {
    let (train, val) = datasets(cfg)?;
    match cfg.eval_split {
        Split::Train => Ok(train),
        Split::Val => val.ok_or_else(|| {
            CliError::Config(
                "eval.split = val but the dataset has no validation split (see data.synth_val_count)".into(),
            )
        }),
    }
}

fn write_effective(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("effective.cfg"), cfg.to_text())?;
    Ok(())
}

fn eval_options(cfg: &RunConfig, render: Option<PathBuf>) -> EvalOptions {
    EvalOptions {
        tta: cfg.eval_tta,
        input_hw: Some(cfg.model.input_hw),
        ignore: cfg.train.ignore_value,
        normalization: Normalization::default(),
        render_dir: render,
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let (train_set, val_set) = datasets(cfg)?;
    if train_set.is_empty() && cfg.train.epochs > 0 {
        return Err(CliError::Config("the training split is empty".into()));
    }
    write_effective(cfg)?;
    let job = TrainJob {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        init_seed: cfg.train.seed,
        workers: cfg.workers,
        out_dir: Some(cfg.output_dir.clone()),
    };
    log::info!(
        "training on {} samples for {} epochs",
        train_set.len(),
        cfg.train.epochs
    );
    let out = train(&job, train_set.as_ref(), val_set.as_deref())?;
    let fmt = |v: Option<f32>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
    println!(
        "iterations {}  initial loss {}  final loss {}  checkpoint {}",
        out.iterations,
        fmt(out.initial_loss),
        fmt(out.final_loss),
        cfg.output_dir.join("final.ckpt").display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model, CliError> {
    let path = checkpoint.map_or_else(|| cfg.output_dir.join("final.ckpt"), Path::to_path_buf);
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path, &cfg.model)?.0)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let source = split_source(cfg)?;
    let render = cfg.eval_render.then(|| cfg.output_dir.join("preds"));
    let opts = eval_options(cfg, render);
    let report = pool(cfg.workers)?.install(|| evaluate(&model, source.as_ref(), &opts))?;
    let m = &report.metrics;
    println!(
        "split {}  samples {}  tta {}",
        cfg.eval_split.name(),
        source.len(),
        cfg.eval_tta
    );
    println!(
        "pixel acc {}  mean acc {}  mIoU {}",
        pct(Some(m.pixel_acc)),
        pct(Some(m.mean_acc)),
        pct(Some(m.miou))
    );
    for (name, iou) in source.classes().names.iter().zip(&m.per_class_iou) {
        println!("  {name:<12} {:>7}", pct(*iou));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let json = serde_json::json!({
        "split": cfg.eval_split.name(), "tta": cfg.eval_tta, "classes": source.classes().names,
        "pixel_acc": m.pixel_acc, "mean_acc": m.mean_acc, "miou": m.miou, "per_class_iou": m.per_class_iou,
    });
    fs::write(cfg.output_dir.join("eval.json"), format!("{json}\n"))?;
    Ok(())
}

fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    images: &[PathBuf],
) -> Result<(), CliError> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let classes = parsegrid_core::data::ClassTable::for_classes(cfg.model.num_classes)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let out = out.map_or_else(|| cfg.output_dir.join("infer"), Path::to_path_buf);
    fs::create_dir_all(&out)?;
    let norm = Normalization::default();
    let (ih, iw) = cfg.model.input_hw;
    pool(cfg.workers)?.install(|| -> Result<(), CliError> {
        for path in images {
            let image = pnm::read_image(path)?;
            let (h, w) = (image.shape().h, image.shape().w);
            // resize to the network input and the logits back
            let resized = resize(&norm.normalize(&image), ih, iw)?;
            let logits = if cfg.eval_tta {
                flip_tta(&model, 0, &resized, &classes.flip_pairs)?
            } else {
                model.logits(0, &resized)?
            };
            let labels = argmax_channels(&resize(&logits, h, w)?);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            pnm::write_labels(&out.join(format!("{stem}_labels.pgm")), &labels)?;
            pnm::write_image(&out.join(format!("{stem}_pred.ppm")), &render_labels(&labels, &classes))?;
            println!(
                "{} -> {}",
                path.display(),
                out.join(format!("{stem}_labels.pgm")).display()
            );
        }
        Ok(())
    })
}

fn resize(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>, CliError> {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return Ok(x.clone());
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = tape
        .bilinear_resize(v, h, w)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(tape.value(r).clone())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let (train_set, val_set) = datasets(cfg)?;
    let eval_set: &dyn SampleSource = match cfg.eval_split {
        Split::Train => train_set.as_ref(),
        Split::Val => val_set
            .as_deref()
            .ok_or_else(|| CliError::Config("eval.split = val but the dataset has no validation split".into()))?,
    };
    write_effective(cfg)?;
    let dir = cfg.output_dir.join("ablation");
    let job = AblationJob {
        base: cfg.model.clone(),
        train: cfg.train.clone(),
        init_seed: cfg.train.seed,
        workers: cfg.workers,
        eval: eval_options(cfg, None),
        out_dir: Some(dir.clone()),
    };
    let report = run_ablation(&job, train_set.as_ref(), eval_set)?;
    print!("{}", report.table());
    println!("report: {}", dir.join("ablation.txt").display());
    let failed: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.result.is_err())
        .map(|r| r.variant.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("variants failed: {}", failed.join(", "))))
    }
}

fn cmd_gradcheck(cfg: &RunConfig, scale: Scale) -> Result<(), CliError> {
    let scale = match scale {
        Scale::Ops => SuiteScale::Ops,
        Scale::Default => SuiteScale::Full,
    };
    let entries = pool(cfg.workers)?.install(|| run_suite(scale))?;
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    println!(
        "{:<width$}  {:>12}  {:>9}  {:>8}  result",
        "check", "max rel err", "tolerance", "seconds"
    );
    for e in &entries {
        println!(
            "{:<width$}  {:>12.3e}  {:>9.0e}  {:>8.2}  {}",
            e.name,
            e.report.max_relative_error,
            e.tolerance,
            e.seconds,
            if e.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{failed} gradient checks exceeded tolerance"
        )))
    }
}

fn cmd_synth(seed: u64, count: usize, k: usize, hw: (usize, usize), out: &Path) -> Result<(), CliError> {
    let ds = SynthDataset::new(seed, count, k, hw)?;
    for sub in ["images", "labels", "splits"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let mut stems = String::new();
    for i in 0..count {
        let s = ds.get(i)?;
        let stem = format!("{i:06}");
        pnm::write_image(&out.join("images").join(format!("{stem}.ppm")), &s.image)?;
        pnm::write_labels(&out.join("labels").join(format!("{stem}.pgm")), &s.labels)?;
        stems.push_str(&stem);
        stems.push('\n');
    }
    fs::write(out.join("splits/train.txt"), stems)?;
    println!(
        "wrote {count} samples (K = {k}, {}x{}, seed {seed}) to {}",
        hw.0,
        hw.1,
        out.display()
    );
    Ok(())
}
