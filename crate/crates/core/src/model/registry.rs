use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{RunningStats, Shape, Tensor};

/// Index of a trainable tensor in a [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Index of a batch-norm running-statistics buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Biases and BN affine terms are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor<f32>,
    pub kind: ParamKind,
}

/// Named parameters in construction order, plus BN running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: IndexMap<String, Param>,
    stats: IndexMap<String, RunningStats>,
}

impl ParamRegistry {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn stats(&self, id: BnId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: BnId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn stats_by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.get_mut(name)
    }

    pub fn num_stats(&self) -> usize {
        self.stats.len()
    }

    /// Panics on duplicate names: every tensor is registered exactly once.
    pub(crate) fn insert(&mut self, name: String, param: Param) -> ParamId {
        let (idx, prev) = self.params.insert_full(name, param);
        assert!(prev.is_none(), "duplicate parameter name {}", self.name(ParamId(idx)));
        ParamId(idx)
    }

    pub(crate) fn insert_stats(&mut self, name: String, stats: RunningStats) -> BnId {
        let (idx, prev) = self.stats.insert_full(name, stats);
        assert!(prev.is_none(), "duplicate batch-norm name");
        BnId(idx)
    }
}

/// Registers parameters under a dotted name prefix with seeded initialisation.
pub(crate) struct Builder<'a> {
    registry: &'a mut ParamRegistry,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(registry: &'a mut ParamRegistry, seed: u64) -> Self {
        Builder {
            registry,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push(name);
        let r = f(self);
        self.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Gaussian with standard deviation `sqrt(2 / fan_in)`.
    pub fn weight(&mut self, leaf: &str, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel())
            .map(|_| normal.sample(&mut self.rng) as f32)
            .collect();
        let value = Tensor::new(shape, data).expect("weight shape");
        let name = self.full_name(leaf);
        self.registry.insert(
            name,
            Param {
                value,
                kind: ParamKind::Weight,
            },
        )
    }

    pub fn constant(&mut self, leaf: &str, len: usize, value: f32, kind: ParamKind) -> ParamId {
        let name = self.full_name(leaf);
        self.registry.insert(
            name,
            Param {
                value: Tensor::full(Shape::vector(len), value),
                kind,
            },
        )
    }

    pub fn running_stats(&mut self, channels: usize) -> BnId {
        let name = self.prefix.join(".");
        self.registry.insert_stats(name, RunningStats::new(channels))
    }
}
