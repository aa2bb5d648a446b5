//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use parsegrid_core::model::ModelConfig;
use parsegrid_core::trainer::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{origin}:{line}: expected `key = value`, got {text:?}")]
    Syntax { origin: String, line: usize, text: String },
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: key {key:?} given twice")]
    Duplicate { origin: String, key: String },
    #[error("{origin}: invalid value {value:?} for {key}: {reason}")]
    Value {
        origin: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Generated on the fly by the synthetic figure generator.
    Synth,
    /// A directory with `images/`, `labels/` and optional `splits/`.
    Dir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub synth_seed: u64,
    pub synth_count: usize,
    pub synth_val_count: usize,
    pub synth_hw: (usize, usize),
}

/// Everything a command reads from the config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval_tta: bool,
    pub eval_render: bool,
    pub eval_split: Split,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                source: DataSource::Synth,
                root: None,
                synth_seed: 0,
                synth_count: 200,
                synth_val_count: 0,
                synth_hw: (256, 192),
            },
            eval_tta: false,
            eval_render: false,
            eval_split: Split::Val,
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
        }
    }
}

/// Every accepted key with its meaning, in the order the effective config
/// is written.
pub const KEYS: &[(&str, &str)] = &[
    (
        "model.num_classes",
        "classes including background, 2..=20 for bundled data",
    ),
    (
        "model.base_width",
        "channels of the deepest encoder stage, multiple of 8",
    ),
    ("model.stem_width", "channels of the 7x7 stem convolution"),
    (
        "model.encoder_blocks",
        "bottlenecks per encoder stage E2..E5, comma separated",
    ),
    (
        "model.aspp_dilations",
        "dilations of the 3x3 ASPP branches, comma separated",
    ),
    ("model.aspp_pool_branch", "add an image-pooling ASPP branch"),
    (
        "model.use_aspp",
        "ASPP centre (otherwise cascaded dilated convolutions)",
    ),
    ("model.use_smooth", "Smooth refiner over all decoder levels"),
    (
        "model.use_multiscale_loss",
        "auxiliary losses on the four decoder levels",
    ),
    ("model.aux_loss_weight", "weight of each auxiliary loss"),
    ("model.input_hw", "network input HxW, both multiples of 16"),
    ("train.base_lr", "initial learning rate of the poly schedule"),
    ("train.lr_power", "exponent of the poly schedule"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 decay on convolution weights"),
    ("train.batch_size", "samples per step"),
    ("train.epochs", "passes over the training set"),
    ("train.seed", "seed of initialisation, data order and augmentation"),
    ("train.ignore_value", "label value excluded from loss and metrics"),
    ("train.augment", "random scale/rotate/crop/flip"),
    (
        "train.checkpoint_every",
        "save a checkpoint every N epochs (0 = final only)",
    ),
    ("train.val_every", "validate every N epochs (0 = never)"),
    ("data.source", "synth or dir"),
    ("data.root", "dataset directory when data.source = dir"),
    ("data.synth_seed", "seed of the first synthetic training sample"),
    ("data.synth_count", "synthetic training samples"),
    ("data.synth_val_count", "synthetic validation samples (0 = none)"),
    ("data.synth_hw", "synthetic canvas HxW"),
    ("eval.tta", "average logits with the mirrored input"),
    ("eval.render", "write <stem>_pred.ppm colour renders"),
    ("eval.split", "split scored by eval and ablate: train or val"),
    ("output.dir", "directory for checkpoints, logs and reports"),
    ("run.workers", "worker threads"),
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_hw(v: &str) -> Result<(usize, usize), String> {
    let (h, w) = v.split_once(['x', 'X']).ok_or("expected HxW")?;
    Ok((parse_num(h.trim())?, parse_num(w.trim())?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        let r: Result<(), String> = (|| {
            match key {
                "model.num_classes" => m.num_classes = parse_num(value)?,
                "model.base_width" => m.base_width = parse_num(value)?,
                "model.stem_width" => m.stem_width = parse_num(value)?,
                "model.encoder_blocks" => {
                    let v = parse_list(value)?;
                    m.encoder_blocks = v.try_into().map_err(|_| "expected four counts".to_string())?;
                }
                "model.aspp_dilations" => m.aspp_dilations = parse_list(value)?,
                "model.aspp_pool_branch" => m.aspp_pool_branch = parse_bool(value)?,
                "model.use_aspp" => m.use_aspp = parse_bool(value)?,
                "model.use_smooth" => m.use_smooth = parse_bool(value)?,
                "model.use_multiscale_loss" => m.use_multiscale_loss = parse_bool(value)?,
                "model.aux_loss_weight" => m.aux_loss_weight = parse_num(value)?,
                "model.input_hw" => m.input_hw = parse_hw(value)?,
                "train.base_lr" => t.base_lr = parse_num(value)?,
                "train.lr_power" => t.lr_power = parse_num(value)?,
                "train.momentum" => t.momentum = parse_num(value)?,
                "train.weight_decay" => t.weight_decay = parse_num(value)?,
                "train.batch_size" => t.batch_size = parse_num(value)?,
                "train.epochs" => t.epochs = parse_num(value)?,
                "train.seed" => t.seed = parse_num(value)?,
                "train.ignore_value" => t.ignore_value = parse_num(value)?,
                "train.augment" => t.augment = parse_bool(value)?,
                "train.checkpoint_every" => t.checkpoint_every = parse_num(value)?,
                "train.val_every" => t.val_every = parse_num(value)?,
                "data.source" => {
                    d.source = match value {
                        "synth" => DataSource::Synth,
                        "dir" => DataSource::Dir,
                        _ => return Err("expected synth or dir".into()),
                    }
                }
                "data.root" => d.root = (!value.is_empty()).then(|| PathBuf::from(value)),
                "data.synth_seed" => d.synth_seed = parse_num(value)?,
                "data.synth_count" => d.synth_count = parse_num(value)?,
                "data.synth_val_count" => d.synth_val_count = parse_num(value)?,
                "data.synth_hw" => d.synth_hw = parse_hw(value)?,
                "eval.tta" => self.eval_tta = parse_bool(value)?,
                "eval.render" => self.eval_render = parse_bool(value)?,
                "eval.split" => {
                    self.eval_split = match value {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        _ => return Err("expected train or val".into()),
                    }
                }
                "output.dir" => self.output_dir = PathBuf::from(value),
                "run.workers" => self.workers = parse_num(value)?,
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        r.map_err(|reason| {
            if reason.is_empty() {
                ConfigError::UnknownKey {
                    origin: origin.into(),
                    key: key.into(),
                }
            } else {
                ConfigError::Value {
                    origin: origin.into(),
                    key: key.into(),
                    value: value.into(),
                    reason,
                }
            }
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: origin.into(),
                line: i + 1,
                text: raw.into(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    origin: origin.into(),
                    key: key.into(),
                });
            }
            cfg.set(key, value.trim(), &format!("{origin}:{}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    fn value(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let hw = |(h, w): (usize, usize)| format!("{h}x{w}");
        match key {
            "model.num_classes" => m.num_classes.to_string(),
            "model.base_width" => m.base_width.to_string(),
            "model.stem_width" => m.stem_width.to_string(),
            "model.encoder_blocks" => join(&m.encoder_blocks),
            "model.aspp_dilations" => join(&m.aspp_dilations),
            "model.aspp_pool_branch" => m.aspp_pool_branch.to_string(),
            "model.use_aspp" => m.use_aspp.to_string(),
            "model.use_smooth" => m.use_smooth.to_string(),
            "model.use_multiscale_loss" => m.use_multiscale_loss.to_string(),
            "model.aux_loss_weight" => m.aux_loss_weight.to_string(),
            "model.input_hw" => hw(m.input_hw),
            "train.base_lr" => t.base_lr.to_string(),
            "train.lr_power" => t.lr_power.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.ignore_value" => t.ignore_value.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.val_every" => t.val_every.to_string(),
            "data.source" => match d.source {
                DataSource::Synth => "synth".into(),
                DataSource::Dir => "dir".into(),
            },
            "data.root" => d.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.synth_seed" => d.synth_seed.to_string(),
            "data.synth_count" => d.synth_count.to_string(),
            "data.synth_val_count" => d.synth_val_count.to_string(),
            "data.synth_hw" => hw(d.synth_hw),
            "eval.tta" => self.eval_tta.to_string(),
            "eval.render" => self.eval_render.to_string(),
            "eval.split" => self.eval_split.name().into(),
            "output.dir" => self.output_dir.display().to_string(),
            "run.workers" => self.workers.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// Every key with its current value, one per line, with comments.
    /// Parsing the result gives back an identical configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            writeln!(out, "# {doc}\n{key} = {}", self.value(key)).expect("write to string");
        }
        out
    }

    /// Checks that go beyond single values.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| ConfigError::Invalid {
            key: key.into(),
            reason,
        };
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        if self.workers == 0 {
            return Err(invalid("run.workers", "must be at least 1".into()));
        }
        if self.data.source == DataSource::Dir {
            match &self.data.root {
                None => return Err(invalid("data.root", "required when data.source = dir".into())),
                Some(p) if !p.is_dir() => {
                    return Err(invalid("data.root", format!("{} is not a directory", p.display())));
                }
                _ => {}
            }
        }
        Ok(())
    }
}
