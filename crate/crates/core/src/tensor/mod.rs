//! Dense NCHW tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value: a 4-D shape plus row-major storage. Gradients
//! live on the [`Tape`], which records every operation applied to its
//! [`Var`] handles and replays them in reverse in [`Tape::backward`].
//!
//! All operations are generic over [`Element`] so the same code path runs in
//! `f32` for training and in `f64` for finite-difference oracles.

mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt;

use num_traits::Float;
use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};
pub use tape::{BatchStats, Gradients, Tape, Var};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum used by batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid geometry in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalar(Shape),
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("label {label} at (n={n}, y={y}, x={x}) is outside [0, {classes}) and is not the ignore value")]
    Label {
        label: u8,
        n: usize,
        y: usize,
        x: usize,
        classes: usize,
    },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn geometry_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Geometry {
        op,
        detail: detail.into(),
    }
}

/// Scalar type a tensor can hold.
pub trait Element: Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn from_f32(v: f32) -> Self {
        v
    }

    fn as_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// Shape of a per-channel parameter vector such as a bias or BN gamma.
    pub const fn vector(len: usize) -> Self {
        Shape::new(len, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.numel() == 0 {
            return Err(geometry_err("tensor", format!("empty shape {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor from a function of `(n, c, y, x)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// One `(1, C, H, W)` slice of the batch.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let len = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or_else(|| shape_err("stack", "no tensors given"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(shape_err("stack", format!("{} vs {}", t.shape, s)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Mirrors every plane along the width axis.
    pub fn flip_w(&self) -> Tensor<T> {
        let w = self.shape.w;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(w) {
            data.extend(row.iter().rev());
        }
        Tensor {
            shape: self.shape,
            data,
        }
    }

    /// Exchanges the channel pairs in `pairs`; out-of-range pairs are ignored.
    pub fn swap_channels(&self, pairs: &[(usize, usize)]) -> Tensor<T> {
        let mut out = self.clone();
        let plane = self.shape.plane();
        for n in 0..self.shape.n {
            for &(a, b) in pairs {
                if a >= self.shape.c || b >= self.shape.c {
                    continue;
                }
                let ia = (n * self.shape.c + a) * plane;
                let ib = (n * self.shape.c + b) * plane;
                out.data[ia..ia + plane].copy_from_slice(&self.data[ib..ib + plane]);
                out.data[ib..ib + plane].copy_from_slice(&self.data[ia..ia + plane]);
            }
        }
        out
    }

    /// Returns the first non-finite element, if any.
    pub fn validate(&self, op: &'static str) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Integer label map `(N, H, W)`; values are class indices or an ignore value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self, TensorError> {
        if data.len() != n * h * w {
            return Err(shape_err(
                "label map",
                format!("{n}x{h}x{w} needs {} labels, got {}", n * h * w, data.len()),
            ));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        }
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn count_valid(&self, ignore: u8) -> usize {
        self.data.iter().filter(|&&v| v != ignore).count()
    }

    /// Concatenates label maps along the batch axis.
    pub fn stack(items: &[LabelMap]) -> Result<Self, TensorError> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("label stack", "no label maps given"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(shape_err(
                    "label stack",
                    format!("{}x{} vs {}x{}", m.h, m.w, first.h, first.w),
                ));
            }
            n += m.n;
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(n, first.h, first.w, data)
    }

    pub fn flip_w(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.w) {
            data.extend(row.iter().rev());
        }
        LabelMap { data, ..*self }
    }

    /// Relabels each pixel through the swap pairs (both directions).
    pub fn swap_labels(&self, pairs: &[(usize, usize)]) -> LabelMap {
        let mut table: [u8; 256] = std::array::from_fn(|i| i as u8);
        for &(a, b) in pairs {
            if a < 256 && b < 256 {
                table[a] = b as u8;
                table[b] = a as u8;
            }
        }
        LabelMap {
            data: self.data.iter().map(|&v| table[v as usize]).collect(),
            ..*self
        }
    }
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_channels<T: Element>(logits: &Tensor<T>) -> LabelMap {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = LabelMap::filled(s.n, s.h, s.w, 0);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = logits.data[base + p];
            for c in 1..s.c {
                let v = logits.data[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.data[n * plane + p] = best as u8;
        }
    }
    out
}

/// Running mean/variance for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average towards the batch statistics.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn flip_and_swap_are_involutions() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 4, 3, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.flip_w().flip_w(), t);
        let pairs = [(0, 3), (1, 2)];
        assert_eq!(t.swap_channels(&pairs).swap_channels(&pairs), t);
        assert_eq!(t.flip_w().at(1, 2, 1, 0), t.at(1, 2, 1, 4));
        assert_eq!(t.swap_channels(&pairs).at(0, 0, 2, 2), t.at(0, 3, 2, 2));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let t = Tensor::new(Shape::new(1, 3, 1, 2), vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        let m = argmax_channels(&t);
        assert_eq!(m.data, vec![0, 1]);
    }

    #[test]
    fn label_swap_is_symmetric() {
        let m = LabelMap::new(1, 1, 4, vec![14, 15, 3, 255]).unwrap();
        let s = m.swap_labels(&[(14, 15)]);
        assert_eq!(s.data, vec![15, 14, 3, 255]);
    }
}
