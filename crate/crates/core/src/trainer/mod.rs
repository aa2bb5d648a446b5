//! Poly-schedule momentum SGD on the composite loss, with deterministic data
//! order and checkpoints.

mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{
    decode as decode_checkpoint, decode_raw, encode as encode_checkpoint, load_checkpoint, save_checkpoint,
    CheckpointError, RawCheckpoint, Record, TrainState, MAGIC, VERSION,
};

use crate::data::{augment, collate, fit_to, AugmentConfig, Normalization, SampleSource, SegSample};
use crate::evaluator::{evaluate, EvalOptions};
use crate::model::{Model, ModelConfig, ParamId};
use crate::tensor::{LabelMap, Tape, Tensor};
use crate::{Error, Result};

/// Optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ignore_value: u8,
    /// Random scale/rotate/crop/flip per sample; otherwise samples are only
    /// centre-fitted to the input size.
    pub augment: bool,
    /// Save `epoch_NNNN.ckpt` every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Evaluate the validation set every this many epochs (0 = never).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.002,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            ignore_value: crate::data::IGNORE,
            augment: true,
            checkpoint_every: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), crate::model::ConfigError> {
        let mut v = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            v.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_power >= 0.0 && self.lr_power.is_finite()) {
            v.push(format!("lr_power must be >= 0, got {}", self.lr_power));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(crate::model::ConfigError { violations: v })
        }
    }

    /// `epochs * ceil(len / batch_size)`.
    pub fn max_iter(&self, dataset_len: usize) -> u64 {
        (self.epochs * dataset_len.div_ceil(self.batch_size)) as u64
    }
}

/// `base_lr * (1 - iter/max_iter)^power`; iterations past the end give 0.
pub fn poly_lr(iter: u64, max_iter: u64, base_lr: f64, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        if iter > max_iter {
            log::warn!("iteration {iter} exceeds max_iter {max_iter}; learning rate clamped to 0");
        }
        return if max_iter == 0 && iter == 0 { base_lr } else { 0.0 };
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// Momentum SGD: `v = m v + g + wd p` (decay only on conv weights),
/// `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model
                .registry()
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Applies one update; `grads[i]` belongs to the i-th registry entry.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        let reg = model.registry_mut();
        if grads.len() != reg.len() {
            return Err(Error::Invalid(format!(
                "expected {} gradients, got {}",
                reg.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = g else {
                return Err(Error::Invalid(format!(
                    "missing gradient for parameter {}",
                    reg.name(id)
                )));
            };
            let param = reg.get_mut(id);
            let wd = if param.kind.decays() { self.weight_decay } else { 0.0 };
            let v = self.velocity[i].data_mut();
            for ((p, v), &g) in param.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let nv = (self.momentum * *v as f64 + g as f64 + wd * *p as f64) as f32;
                *v = nv;
                *p = (*p as f64 - lr * nv as f64) as f32;
            }
        }
        Ok(())
    }
}

/// Loss values of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub total: f32,
    pub main: f32,
    pub aux: Vec<f32>,
}

/// Forward, backward and update on one batch.
pub fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    images: &Tensor<f32>,
    labels: &LabelMap,
    ignore: u8,
    lr: f64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let mut ctx = model.context(&mut tape, &params, true);
    let out = model.forward(&mut ctx, x)?;
    let updates = std::mem::take(&mut ctx.bn_updates);
    let terms = model.total_loss(&mut tape, &out, labels, ignore)?;
    let stats = StepStats {
        total: tape.value(terms.total).item(),
        main: tape.value(terms.main).item(),
        aux: terms.aux.iter().map(|&a| tape.value(a).item()).collect(),
    };
    if !stats.total.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss {}", stats.total)));
    }
    let mut grads = tape.backward(terms.total)?;
    let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|&p| grads.take(p)).collect();
    sgd.step(model, &grads, lr)?;
    model.apply_bn_updates(&updates);
    Ok(stats)
}

fn mix(parts: &[u64]) -> u64 {
    // SplitMix64 finaliser folded over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Seed of the augmentation stream for one sample in one epoch.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix(&[seed, 1, epoch as u64, index as u64])
}

/// Seed identifying one batch in diagnostics.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    mix(&[seed, 2, epoch as u64, batch as u64])
}

/// Visiting order of the samples in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, 3, epoch as u64])));
    order
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
    /// Thread count of the data pipeline and kernels.
    pub workers: usize,
    /// Directory for checkpoints and `metrics.jsonl`; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    /// JSON lines, as written to `metrics.jsonl`.
    pub log: Vec<String>,
    /// Loss of the first optimisation step.
    pub initial_loss: Option<f32>,
    /// Mean loss over the last epoch.
    pub final_loss: Option<f32>,
    pub iterations: u64,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.model, &self.state)
    }
}

fn prepare(
    source: &dyn SampleSource,
    index: usize,
    seed: u64,
    epoch: usize,
    cfg: &TrainConfig,
    hw: (usize, usize),
    norm: &Normalization,
) -> Result<SegSample> {
    let sample = source.get(index)?;
    let mut s = if cfg.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, index));
        augment(&sample, &mut rng, &AugmentConfig::new(hw), source.classes())
    } else {
        fit_to(&sample, hw, source.classes())
    };
    s.image = norm.normalize(&s.image);
    Ok(s)
}

struct LogSink {
    lines: Vec<String>,
    file: Option<fs::File>,
}

impl LogSink {
    fn push(&mut self, value: serde_json::Value) -> Result<()> {
        let line = value.to_string();
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

/// Runs `job` on `train_set`, validating on `val_set` when given.
pub fn train(job: &TrainJob, train_set: &dyn SampleSource, val_set: Option<&dyn SampleSource>) -> Result<TrainOutcome> {
    job.model.validate()?;
    job.train.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job.workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| train_inner(job, train_set, val_set))
}

fn train_inner(
    job: &TrainJob,
    train_set: &dyn SampleSource,
    val_set: Option<&dyn SampleSource>,
) -> Result<TrainOutcome> {
    let cfg = &job.train;
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if train_set.classes().len() != job.model.num_classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes but the model predicts {}",
            train_set.classes().len(),
            job.model.num_classes
        )));
    }
    if let Some(dir) = &job.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut sink = LogSink {
        lines: Vec::new(),
        file: match &job.out_dir {
            Some(dir) => Some(fs::File::create(dir.join("metrics.jsonl"))?),
            None => None,
        },
    };
    let mut model = Model::build(&job.model, job.init_seed)?;
    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let norm = Normalization::default();
    let hw = job.model.input_hw;
    let max_iter = cfg.max_iter(train_set.len());
    let mut iteration = 0u64;
    let mut initial_loss = None;
    let mut final_loss = None;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut epoch_sum = 0.0f64;
        let mut epoch_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples = chunk
                .par_iter()
                .map(|&i| prepare(train_set, i, cfg.seed, epoch, cfg, hw, &norm))
                .collect::<Result<Vec<_>>>()?;
            let (images, labels) = collate(&samples)?;
            let lr = poly_lr(iteration, max_iter, cfg.base_lr, cfg.lr_power);
            let stats = match train_step(&mut model, &mut sgd, &images, &labels, cfg.ignore_value, lr) {
                Ok(s) => s,
                Err(Error::Invalid(msg)) if msg.starts_with("non-finite loss") => {
                    let bseed = batch_seed(cfg.seed, epoch, b);
                    let loss = msg.trim_start_matches("non-finite loss ").parse().unwrap_or(f32::NAN);
                    if let Some(dir) = &job.out_dir {
                        let dump = json!({
                            "iteration": iteration, "epoch": epoch, "batch": b,
                            "batch_seed": bseed, "samples": chunk, "loss": loss.to_string(),
                        });
                        write_file(&dir.join("nonfinite_batch.json"), dump.to_string().as_bytes())?;
                    }
                    log::error!(
                        "non-finite loss at iteration {iteration}; batch seed {bseed:#018x}, samples {chunk:?}"
                    );
                    return Err(Error::NonFiniteLoss {
                        loss,
                        iteration,
                        epoch,
                        batch_seed: bseed,
                    });
                }
                Err(e) => return Err(e),
            };
            initial_loss.get_or_insert(stats.total);
            epoch_sum += stats.total as f64;
            epoch_batches += 1;
            sink.push(json!({
                "epoch": epoch, "iter": iteration, "lr": lr,
                "loss": stats.total, "main_loss": stats.main, "aux_losses": stats.aux,
            }))?;
            iteration += 1;
        }
        let mean = (epoch_sum / epoch_batches.max(1) as f64) as f32;
        final_loss = Some(mean);
        let mut record = json!({ "epoch": epoch, "iter": iteration, "train_loss_mean": mean });
        if let Some(val) = val_set {
            if cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0 {
                let opts = EvalOptions {
                    input_hw: Some(hw),
                    ignore: cfg.ignore_value,
                    ..EvalOptions::default()
                };
                let report = evaluate(&model, val, &opts)?;
                record["val"] = json!({
                    "pixel_acc": report.metrics.pixel_acc,
                    "mean_acc": report.metrics.mean_acc,
                    "miou": report.metrics.miou,
                });
            }
        }
        sink.push(record)?;
        log::info!("epoch {} / {}: mean loss {mean:.4}", epoch + 1, cfg.epochs);
        if let Some(dir) = &job.out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let state = TrainState {
                    iteration,
                    epoch: (epoch + 1) as u64,
                    momentum: Some(sgd.velocity.clone()),
                };
                write_file(
                    &dir.join(format!("epoch_{:04}.ckpt", epoch + 1)),
                    &encode_checkpoint(&model, &state),
                )?;
            }
        }
    }
    let state = TrainState {
        iteration,
        epoch: cfg.epochs as u64,
        momentum: Some(sgd.velocity),
    };
    if let Some(dir) = &job.out_dir {
        write_file(&dir.join("final.ckpt"), &encode_checkpoint(&model, &state))?;
    }
    Ok(TrainOutcome {
        model,
        state,
        log: sink.lines,
        initial_loss,
        final_loss,
        iterations: iteration,
    })
}
