//! Samples, netpbm I/O, the synthetic figure generator, augmentation and the
//! directory loader.

mod augment;
mod classes;
mod lip;
pub mod pnm;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use augment::{apply, augment, flip_labels, flip_sample, AugmentConfig, AugmentDraw};
pub use classes::{part_to_class, ClassTable, LIP_FLIP_PAIRS, LIP_NAMES};
pub use lip::{load_lip_dir, load_sample, LipIndex, SampleRef};
pub use synth::{synth_sample, MIN_SIDE};

use crate::tensor::{LabelMap, Shape, Tensor};

/// Label value excluded from loss and metrics.
pub const IGNORE: u8 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}malformed netpbm at byte {offset}: {reason}", path_prefix(.path))]
    Pnm {
        path: Option<PathBuf>,
        offset: usize,
        reason: String,
    },
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("path does not exist or is not a directory: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("unmatched dataset files: {}", .0.join(", "))]
    Orphans(Vec<String>),
    #[error("split list {} names unknown stem {stem:?}", .split.display())]
    UnknownStem { split: PathBuf, stem: String },
    #[error("{stem}: image is {image:?} but labels are {labels:?}")]
    SizeMismatch {
        stem: String,
        image: (usize, usize),
        labels: (usize, usize),
    },
    #[error("{}: label {value} is outside [0, {classes}) and is not the ignore value", .path.display())]
    LabelRange { path: PathBuf, value: u8, classes: usize },
    #[error("canvas {h}x{w} is smaller than the minimum {min}x{min}")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("number of classes must be in [2, 20], got {0}")]
    Classes(usize),
}

fn path_prefix(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default()
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at_path(self, p: &Path) -> Self {
        match self {
            DataError::Pnm { offset, reason, .. } => DataError::Pnm {
                path: Some(p.to_path_buf()),
                offset,
                reason,
            },
            DataError::Format(msg) => DataError::Format(format!("{}: {msg}", p.display())),
            other => other,
        }
    }
}

/// An image in `[0, 1]` with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `(1, 3, H, W)`.
    pub image: Tensor<f32>,
    /// `(1, H, W)`.
    pub labels: LabelMap,
    pub ignore: u8,
}

impl SegSample {
    pub fn hw(&self) -> (usize, usize) {
        (self.labels.h, self.labels.w)
    }
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn normalize(&self, image: &Tensor<f32>) -> Tensor<f32> {
        self.map(image, |v, c| (v - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, image: &Tensor<f32>) -> Tensor<f32> {
        self.map(image, |v, c| v * self.std[c] + self.mean[c])
    }

    fn map(&self, image: &Tensor<f32>, f: impl Fn(f32, usize) -> f32) -> Tensor<f32> {
        let s = image.shape();
        assert_eq!(s.c, 3, "normalization expects RGB");
        Tensor::from_fn(s, |n, c, y, x| f(image.at(n, c, y, x), c))
    }
}

/// Random-access sample provider shared by training and evaluation.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<SegSample, DataError>;

    /// Display name of sample `index`, used for rendered files.
    fn stem(&self, index: usize) -> String {
        format!("{index:06}")
    }

    fn classes(&self) -> &ClassTable;
}

/// `count` synthetic samples, sample `i` drawn with seed `seed + i`.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub seed: u64,
    pub count: usize,
    pub hw: (usize, usize),
    classes: ClassTable,
}

impl SynthDataset {
    pub fn new(seed: u64, count: usize, num_classes: usize, hw: (usize, usize)) -> Result<Self, DataError> {
        if hw.0 < MIN_SIDE || hw.1 < MIN_SIDE {
            return Err(DataError::TooSmall {
                h: hw.0,
                w: hw.1,
                min: MIN_SIDE,
            });
        }
        Ok(SynthDataset {
            seed,
            count,
            hw,
            classes: ClassTable::for_classes(num_classes)?,
        })
    }
}

impl SampleSource for SynthDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<SegSample, DataError> {
        synth_sample(self.seed.wrapping_add(index as u64), self.classes.len(), self.hw)
    }

    fn classes(&self) -> &ClassTable {
        &self.classes
    }
}

/// One split of a [`LipIndex`].
#[derive(Clone, Debug)]
pub struct LipDataset {
    pub samples: Vec<SampleRef>,
    classes: ClassTable,
}

impl LipDataset {
    pub fn new(index: &LipIndex, split: &str, num_classes: usize) -> Result<Self, DataError> {
        let samples = index
            .split(split)
            .ok_or_else(|| DataError::Format(format!("unknown split {split:?}; expected train or val")))?
            .to_vec();
        Ok(LipDataset {
            samples,
            classes: ClassTable::for_classes(num_classes)?,
        })
    }
}

impl SampleSource for LipDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<SegSample, DataError> {
        load_sample(&self.samples[index], self.classes.len())
    }

    fn stem(&self, index: usize) -> String {
        self.samples[index].stem.clone()
    }

    fn classes(&self) -> &ClassTable {
        &self.classes
    }
}

/// Fits `sample` to `hw` without randomness: centre crop or pad with the
/// image mean and the ignore label. Used for evaluation.
pub fn fit_to(sample: &SegSample, hw: (usize, usize), classes: &ClassTable) -> SegSample {
    if sample.hw() == hw {
        return sample.clone();
    }
    let (h, w) = sample.hw();
    let draw = AugmentDraw {
        offset: ((h as i64 - hw.0 as i64) / 2, (w as i64 - hw.1 as i64) / 2),
        ..AugmentDraw::identity()
    };
    apply(sample, &draw, hw, classes)
}

/// Stacks images and labels of several samples into one batch.
pub fn collate(samples: &[SegSample]) -> Result<(Tensor<f32>, LabelMap), crate::tensor::TensorError> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok((Tensor::stack(&images)?, LabelMap::stack(&labels)?))
}

/// Writes a label map as a colour P6 using the class palette.
pub fn render_labels(labels: &LabelMap, classes: &ClassTable) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, labels.h, labels.w), |_, c, y, x| {
        let v = labels.get(0, y, x) as usize;
        classes.palette.get(v).map_or(1.0, |rgb| rgb[c] as f32 / 255.0)
    })
}
