//! Confusion matrices, segmentation metrics, flip test-time augmentation,
//! split evaluation and the ablation runner.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::data::{fit_to, pnm, render_labels, ClassTable, Normalization, SampleSource, IGNORE};
use crate::model::{Model, ModelConfig};
use crate::tensor::{argmax_channels, LabelMap, Tensor};
use crate::trainer::{train, TrainConfig, TrainJob};
use crate::{Error, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {truth:?}")]
    ShapeMismatch {
        pred: (usize, usize, usize),
        truth: (usize, usize, usize),
    },
    #[error("{which} value {value} at (n={n}, y={y}, x={x}) is outside [0, {classes})")]
    OutOfRange {
        which: &'static str,
        value: u8,
        n: usize,
        y: usize,
        x: usize,
        classes: usize,
    },
    #[error("confusion matrix is empty: no scored pixels")]
    Empty,
    #[error("cannot merge a {0}-class matrix into a {1}-class matrix")]
    ClassCount(usize, usize),
}

/// `counts[truth * K + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds a matrix from rows of ground-truth counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        ConfusionMatrix {
            k,
            counts: rows.concat(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth is not `ignore`. Nothing is counted when
    /// an error is returned.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<(), EvalError> {
        let dims = |m: &LabelMap| (m.n, m.h, m.w);
        if dims(pred) != dims(truth) {
            return Err(EvalError::ShapeMismatch {
                pred: dims(pred),
                truth: dims(truth),
            });
        }
        let plane = truth.h * truth.w;
        let locate = |i: usize, which, value| {
            let (n, r) = (i / plane, i % plane);
            EvalError::OutOfRange {
                which,
                value,
                n,
                y: r / truth.w,
                x: r % truth.w,
                classes: self.k,
            }
        };
        for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if t == ignore {
                continue;
            }
            if t as usize >= self.k {
                return Err(locate(i, "ground-truth", t));
            }
            if p as usize >= self.k {
                return Err(locate(i, "prediction", p));
            }
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t != ignore {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.k != self.k {
            return Err(EvalError::ClassCount(other.k, self.k));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics, EvalError> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::Empty);
        }
        let k = self.k;
        let diag: Vec<u64> = (0..k).map(|i| self.get(i, i)).collect();
        let row: Vec<u64> = (0..k).map(|i| (0..k).map(|j| self.get(i, j)).sum()).collect();
        let col: Vec<u64> = (0..k).map(|j| (0..k).map(|i| self.get(i, j)).sum()).collect();
        let per_class_acc: Vec<Option<f64>> = (0..k)
            .map(|i| (row[i] > 0).then(|| diag[i] as f64 / row[i] as f64))
            .collect();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|i| {
                let union = row[i] + col[i] - diag[i];
                (union > 0).then(|| diag[i] as f64 / union as f64)
            })
            .collect();
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Metrics {
            pixel_acc: diag.iter().sum::<u64>() as f64 / total as f64,
            mean_acc: mean(&per_class_acc),
            miou: mean(&per_class_iou),
            per_class_acc,
            per_class_iou,
        })
    }
}

/// Scores derived from a confusion matrix. Classes absent from both truth
/// and prediction are `None` and excluded from the means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub miou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Anything that maps a normalised `(1, 3, H, W)` image to `(1, K, H, W)`
/// logits.
pub trait Segmenter: Sync {
    /// `index` is the position of the sample in the evaluated split; real
    /// models ignore it, test oracles use it to look up ground truth.
    fn logits(&self, index: usize, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Segmenter for Model {
    fn logits(&self, _index: usize, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(image)?)
    }
}

/// Adapts a closure into a [`Segmenter`].
pub struct FnSegmenter<F>(pub F);

impl<F> Segmenter for FnSegmenter<F>
where
    F: Fn(usize, &Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    fn logits(&self, index: usize, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        (self.0)(index, image)
    }
}

/// Mirrors logits in width and exchanges the channels of each flip pair.
pub fn unflip_logits(logits: &Tensor<f32>, flip_pairs: &[(usize, usize)]) -> Tensor<f32> {
    logits.flip_w().swap_channels(flip_pairs)
}

/// `0.5 (f(x) + swap(flip(f(flip(x)))))`, averaging logits.
pub fn flip_tta(
    seg: &dyn Segmenter,
    index: usize,
    image: &Tensor<f32>,
    flip_pairs: &[(usize, usize)],
) -> Result<Tensor<f32>> {
    let plain = seg.logits(index, image)?;
    let mirrored = unflip_logits(&seg.logits(index, &image.flip_w())?, flip_pairs);
    if plain.shape() != mirrored.shape() {
        return Err(Error::Invalid(format!(
            "flipped logits {} differ in shape from plain logits {}",
            mirrored.shape(),
            plain.shape()
        )));
    }
    let mut out = plain;
    for (a, &b) in out.data_mut().iter_mut().zip(mirrored.data()) {
        *a = 0.5 * (*a + b);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub tta: bool,
    /// Centre crop/pad each sample to this size before the forward pass.
    pub input_hw: Option<(usize, usize)>,
    pub ignore: u8,
    pub normalization: Normalization,
    /// Directory for `<stem>_pred.ppm` renders.
    pub render_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tta: false,
            input_hw: None,
            ignore: IGNORE,
            normalization: Normalization::default(),
            render_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Per-pixel class prediction, ties resolved to the lowest index.
pub fn predict_labels(
    seg: &dyn Segmenter,
    index: usize,
    image: &Tensor<f32>,
    tta: bool,
    classes: &ClassTable,
) -> Result<LabelMap> {
    let logits = if tta {
        flip_tta(seg, index, image, &classes.flip_pairs)?
    } else {
        seg.logits(index, image)?
    };
    Ok(argmax_channels(&logits))
}

/// Scores `seg` on every sample of `dataset`. Samples are scored in
/// parallel on the current rayon pool, each into its own matrix.
pub fn evaluate(seg: &dyn Segmenter, dataset: &dyn SampleSource, opts: &EvalOptions) -> Result<EvalReport> {
    let classes = dataset.classes();
    if let Some(dir) = &opts.render_dir {
        fs::create_dir_all(dir)?;
    }
    let partial = (0..dataset.len())
        .into_par_iter()
        .map(|i| -> Result<ConfusionMatrix> {
            let mut sample = dataset.get(i)?;
            if let Some(hw) = opts.input_hw {
                sample = fit_to(&sample, hw, classes);
            }
            let image = opts.normalization.normalize(&sample.image);
            let pred = predict_labels(seg, i, &image, opts.tta, classes)?;
            let mut cm = ConfusionMatrix::new(classes.len());
            cm.update(&pred, &sample.labels, opts.ignore)?;
            if let Some(dir) = &opts.render_dir {
                let path = dir.join(format!("{}_pred.ppm", dataset.stem(i)));
                pnm::write_image(&path, &render_labels(&pred, classes))?;
            }
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(classes.len());
    for cm in &partial {
        confusion.merge(cm)?;
    }
    let metrics = confusion.metrics()?;
    Ok(EvalReport { confusion, metrics })
}

/// The five switch combinations, in report order:
/// `(name, use_aspp, use_smooth, use_multiscale_loss)`.
pub const ABLATION_VARIANTS: [(&str, bool, bool, bool); 5] = [
    ("B", false, false, false),
    ("B+A", true, false, false),
    ("B+S", false, true, false),
    ("B+A+S", true, true, false),
    ("B+S+A+L", true, true, true),
];

/// Model configuration of the named variant derived from `base`.
pub fn variant_config(base: &ModelConfig, name: &str) -> Option<ModelConfig> {
    let &(_, a, s, l) = ABLATION_VARIANTS.iter().find(|v| v.0 == name)?;
    Some(ModelConfig {
        use_aspp: a,
        use_smooth: s,
        use_multiscale_loss: l,
        ..base.clone()
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    /// Metrics, or the error that stopped this variant.
    pub result: std::result::Result<Metrics, String>,
    pub initial_loss: Option<f32>,
    pub final_loss: Option<f32>,
    /// Final checkpoint of the variant, when training succeeded.
    pub checkpoint: Option<Vec<u8>>,
    /// Training log lines.
    pub log: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub class_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl AblationReport {
    /// Aligned plain-text table: variant, one IoU column per class in class
    /// table order, mIoU, parameter count. Scores are percentages.
    pub fn table(&self) -> String {
        let mut header: Vec<String> = vec!["variant".into()];
        header.extend(self.class_names.iter().cloned());
        header.push("mIoU".into());
        header.push("params".into());
        let mut rows = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.variant.clone()];
            match &r.result {
                Ok(m) => {
                    cells.extend(m.per_class_iou.iter().map(|&v| pct(v)));
                    cells.push(pct(Some(m.miou)));
                }
                Err(_) => {
                    cells.extend(std::iter::repeat_n("failed".to_string(), self.class_names.len() + 1));
                }
            }
            cells.push(r.params.to_string());
            rows.push(cells);
        }
        let ncol = rows[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
        }
        for r in &self.rows {
            if let Err(e) = &r.result {
                writeln!(out, "{}: {e}", r.variant).expect("write to string");
            }
        }
        out
    }

    /// One JSON object per row.
    pub fn json_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| row_json(r, &self.class_names).to_string())
            .collect()
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn row_json(r: &AblationRow, names: &[String]) -> serde_json::Value {
    match &r.result {
        Ok(m) => json!({
            "variant": r.variant, "params": r.params, "classes": names,
            "per_class_iou": m.per_class_iou, "miou": m.miou,
            "pixel_acc": m.pixel_acc, "mean_acc": m.mean_acc,
            "initial_loss": r.initial_loss, "final_loss": r.final_loss,
        }),
        Err(e) => json!({ "variant": r.variant, "params": r.params, "error": e }),
    }
}

fn write_report(dir: &Path, report: &AblationReport) -> Result<()> {
    fs::write(dir.join("ablation.txt"), report.table())?;
    let mut f = fs::File::create(dir.join("ablation.jsonl"))?;
    for line in report.json_lines() {
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Where and how [`run_ablation`] trains and scores each variant.
#[derive(Clone, Debug)]
pub struct AblationJob {
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub workers: usize,
    pub eval: EvalOptions,
    /// Receives `ablation.txt`, `ablation.jsonl` (rewritten after every
    /// variant) and one checkpoint directory per variant.
    pub out_dir: Option<PathBuf>,
}

/// Trains and scores every variant from identical seeds. A variant that
/// fails is recorded with its error and the remaining variants still run.
pub fn run_ablation(
    job: &AblationJob,
    train_set: &dyn SampleSource,
    eval_set: &dyn SampleSource,
) -> Result<AblationReport> {
    let mut report = AblationReport {
        class_names: train_set.classes().names.clone(),
        rows: Vec::new(),
    };
    if let Some(dir) = &job.out_dir {
        fs::create_dir_all(dir)?;
    }
    for (name, ..) in ABLATION_VARIANTS {
        let cfg = variant_config(&job.base, name).expect("known variant");
        let params = Model::build(&cfg, job.init_seed).map(|m| m.param_count()).unwrap_or(0);
        let tjob = TrainJob {
            model: cfg,
            train: job.train.clone(),
            init_seed: job.init_seed,
            workers: job.workers,
            out_dir: job.out_dir.as_ref().map(|d| d.join(name.replace('+', "_"))),
        };
        log::info!("ablation variant {name}: {params} parameters");
        let row = match train(&tjob, train_set, None).and_then(|o| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(job.workers.max(1))
                .build()
                .map_err(|e| Error::Invalid(e.to_string()))?;
            let r = pool.install(|| evaluate(&o.model, eval_set, &job.eval))?;
            Ok((o, r))
        }) {
            Ok((o, r)) => AblationRow {
                variant: name.to_string(),
                params,
                result: Ok(r.metrics),
                initial_loss: o.initial_loss,
                final_loss: o.final_loss,
                checkpoint: Some(o.checkpoint_bytes()),
                log: o.log,
            },
            Err(e) => {
                log::error!("ablation variant {name} failed: {e}");
                AblationRow {
                    variant: name.to_string(),
                    params,
                    result: Err(e.to_string()),
                    initial_loss: None,
                    final_loss: None,
                    checkpoint: None,
                    log: Vec::new(),
                }
            }
        };
        report.rows.push(row);
        if let Some(dir) = &job.out_dir {
            write_report(dir, &report)?;
        }
    }
    Ok(report)
}
