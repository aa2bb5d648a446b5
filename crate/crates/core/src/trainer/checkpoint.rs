//! Binary checkpoint: `CDLK`, version, config fingerprint, record count, then
//! `{u16 name-len, name, u8 rank, u32 dims.., u32 byte-len, f32 LE payload,
//! u32 CRC32}` per record. All integers little-endian; the CRC covers the
//! record bytes that precede it.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CDLK";
pub const VERSION: u32 = 1;

const ITERATION: &str = "optim.iteration";
const EPOCH: &str = "optim.epoch";
const MOMENTUM_PREFIX: &str = "optim.momentum.";
const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unknown checkpoint version {0}")]
    UnknownVersion(u32),
    #[error("checkpoint fingerprint {found:#010x} does not match model configuration {expected:#010x}")]
    FingerprintMismatch { expected: u32, found: u32 },
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("checksum mismatch in record {index} ({name:?})")]
    Checksum { index: usize, name: String },
    #[error("malformed record {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("{0} trailing bytes after the last record")]
    Trailing(usize),
    #[error("checkpoint lacks tensor {0}")]
    Missing(String),
    #[error("checkpoint has unexpected tensor {0}")]
    Unexpected(String),
    #[error("tensor {name}: checkpoint shape {found} differs from model shape {expected}")]
    ShapeMismatch {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimiser state stored alongside the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: u64,
    /// Momentum buffers in registry order, when saved.
    pub momentum: Option<Vec<Tensor<f32>>>,
}

/// One named tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Record {
    fn from_tensor(name: String, t: &Tensor<f32>) -> Self {
        let s = t.shape();
        let mut dims: Vec<u32> = [s.n, s.c, s.h, s.w].iter().map(|&d| d as u32).collect();
        while dims.len() > 1 && dims[dims.len() - 1] == 1 {
            dims.pop();
        }
        Record {
            name,
            dims,
            data: t.data().to_vec(),
        }
    }

    fn vector(name: String, data: Vec<f32>) -> Self {
        Record {
            name,
            dims: vec![data.len() as u32],
            data,
        }
    }

    fn shape(&self) -> Option<Shape> {
        if self.dims.len() > 4 {
            return None;
        }
        let mut d = [1usize; 4];
        for (slot, &v) in d.iter_mut().zip(&self.dims) {
            *slot = v as usize;
        }
        Some(Shape::new(d[0], d[1], d[2], d[3]))
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&((self.data.len() * 4) as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

fn split_iteration(v: u64) -> Vec<f32> {
    vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32]
}

fn join_iteration(r: &Record, index: usize) -> Result<u64, CheckpointError> {
    let bad = || CheckpointError::Malformed {
        index,
        reason: format!("{} must hold two integers below 2^24", r.name),
    };
    if r.data.len() != 2 {
        return Err(bad());
    }
    let mut out = 0u64;
    for &v in &r.data {
        if !(0.0..16_777_216.0).contains(&v) || v.fract() != 0.0 {
            return Err(bad());
        }
        out = (out << 24) | v as u64;
    }
    Ok(out)
}

/// Serialises parameters, running statistics and optional optimiser state.
pub fn encode(model: &Model, state: &TrainState) -> Vec<u8> {
    let reg = model.registry();
    let mut records: Vec<Record> = reg
        .iter()
        .map(|(name, p)| Record::from_tensor(name.to_string(), &p.value))
        .collect();
    for (name, s) in reg.stats_iter() {
        records.push(Record::vector(format!("{name}{MEAN_SUFFIX}"), s.mean.clone()));
        records.push(Record::vector(format!("{name}{VAR_SUFFIX}"), s.var.clone()));
    }
    if let Some(m) = &state.momentum {
        for ((name, _), buf) in reg.iter().zip(m) {
            records.push(Record::from_tensor(format!("{MOMENTUM_PREFIX}{name}"), buf));
        }
    }
    records.push(Record::vector(ITERATION.into(), split_iteration(state.iteration)));
    records.push(Record::vector(EPOCH.into(), split_iteration(state.epoch)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().fingerprint().to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in &records {
        r.encode_into(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parsed header and records, without reference to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub fingerprint: u32,
    pub records: Vec<Record>,
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnknownVersion(version));
    }
    let fingerprint = r.u32("fingerprint")?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let start = r.pos;
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name_bytes = r.take(name_len, "name")?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")?);
        }
        let byte_len = r.u32("payload length")? as usize;
        let payload = r.take(byte_len, "payload")?;
        let body_end = r.pos;
        let crc = r.u32("checksum")?;
        let name = String::from_utf8_lossy(name_bytes).into_owned();
        if crc32fast::hash(&bytes[start..body_end]) != crc {
            return Err(CheckpointError::Checksum { index, name });
        }
        let numel: u64 = dims.iter().map(|&d| d as u64).product();
        if !byte_len.is_multiple_of(4) || numel * 4 != byte_len as u64 {
            return Err(CheckpointError::Malformed {
                index,
                reason: format!("payload of {byte_len} bytes does not match dims {dims:?}"),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok(RawCheckpoint {
        version,
        fingerprint,
        records,
    })
}

/// Rebuilds a model for `config` and fills it from `bytes`.
pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<(Model, TrainState), crate::Error> {
    let raw = decode_raw(bytes)?;
    let expected = config.fingerprint();
    if raw.fingerprint != expected {
        return Err(CheckpointError::FingerprintMismatch {
            expected,
            found: raw.fingerprint,
        }
        .into());
    }
    let mut model = Model::build(config, 0)?;
    let mut state = TrainState::default();
    let mut momentum: Vec<Option<Tensor<f32>>> = vec![None; model.registry().len()];
    let mut seen_params = vec![false; model.registry().len()];
    let mut seen_stats = vec![[false; 2]; model.registry().num_stats()];
    let names: Vec<String> = model.registry().iter().map(|(n, _)| n.to_string()).collect();
    let stat_names: Vec<String> = model.registry().stats_iter().map(|(n, _)| n.to_string()).collect();

    for (index, rec) in raw.records.into_iter().enumerate() {
        let shape = rec.shape().ok_or_else(|| CheckpointError::Malformed {
            index,
            reason: format!("rank {} exceeds 4", rec.dims.len()),
        })?;
        if rec.name == ITERATION {
            state.iteration = join_iteration(&rec, index)?;
        } else if rec.name == EPOCH {
            state.epoch = join_iteration(&rec, index)?;
        } else if let Some(pname) = rec.name.strip_prefix(MOMENTUM_PREFIX) {
            let i = names
                .iter()
                .position(|n| n == pname)
                .ok_or_else(|| CheckpointError::Unexpected(rec.name.clone()))?;
            let expected = model.registry().get(crate::model::ParamId(i)).value.shape();
            check_shape(&rec.name, expected, shape)?;
            momentum[i] = Some(Tensor::new(expected, rec.data).expect("sized"));
        } else if let Some(i) = names.iter().position(|n| *n == rec.name) {
            let param = &mut model.registry_mut().get_mut(crate::model::ParamId(i)).value;
            check_shape(&rec.name, param.shape(), shape)?;
            param.data_mut().copy_from_slice(&rec.data);
            seen_params[i] = true;
        } else {
            let (base, slot) = if let Some(b) = rec.name.strip_suffix(MEAN_SUFFIX) {
                (b, 0)
            } else if let Some(b) = rec.name.strip_suffix(VAR_SUFFIX) {
                (b, 1)
            } else {
                return Err(CheckpointError::Unexpected(rec.name).into());
            };
            let i = stat_names
                .iter()
                .position(|n| n == base)
                .ok_or_else(|| CheckpointError::Unexpected(rec.name.clone()))?;
            let stats = model.registry_mut().stats_mut(crate::model::BnId(i));
            let target = if slot == 0 { &mut stats.mean } else { &mut stats.var };
            check_shape(&rec.name, Shape::vector(target.len()), shape)?;
            target.copy_from_slice(&rec.data);
            seen_stats[i][slot] = true;
        }
    }
    if let Some(i) = seen_params.iter().position(|s| !s) {
        return Err(CheckpointError::Missing(names[i].clone()).into());
    }
    if let Some(i) = seen_stats.iter().position(|s| !s[0] || !s[1]) {
        return Err(CheckpointError::Missing(format!("{}{MEAN_SUFFIX}", stat_names[i])).into());
    }
    if momentum.iter().any(Option::is_some) {
        let bufs = momentum
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or_else(|| CheckpointError::Missing(format!("{MOMENTUM_PREFIX}{}", names[i]))))
            .collect::<Result<Vec<_>, _>>()?;
        state.momentum = Some(bufs);
    }
    Ok((model, state))
}

fn check_shape(name: &str, expected: Shape, found: Shape) -> Result<(), CheckpointError> {
    if expected != found {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<(), CheckpointError> {
    fs::write(path, encode(model, state)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<(Model, TrainState), crate::Error> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, config)
}
