//! Finite-difference checks of every differentiable primitive and of the
//! whole network, shared by the `gradcheck` command and the test suites.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelConfig, ParamKind};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{
    finite_diff_check_many, GradCheckReport, LabelMap, RunningStats, Shape, Tape, Tensor, TensorError, Var,
};
use crate::Result;

/// Relative tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Relative tolerance for the end-to-end network check.
pub const MODEL_TOLERANCE: f64 = 5e-3;
/// Central-difference step.
pub const EPS: f64 = 1e-5;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error <= self.tolerance
    }
}

/// Which checks [`run_suite`] performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteScale {
    /// Primitive operations only.
    Ops,
    /// Primitives plus the end-to-end network at base width 8, 32x32 input.
    Full,
}

fn uniform(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Magnitudes in `[margin, 1]` with random sign, away from ReLU's kink.
fn away_from_zero(shape: Shape, seed: u64, margin: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * p)` for a fixed random probe `p`, so every output element
/// carries a distinct weight.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let p = t.constant(uniform(t.shape(y), seed));
    let m = t.mul(y, p)?;
    Ok(t.sum(m))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + Sync>;

fn op_cases() -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let x = away_from_zero(Shape::new(2, 3, 6, 6), 1, 10.0 * EPS);
    let w = uniform(Shape::new(4, 3, 3, 3), 2);
    let b = uniform(Shape::vector(4), 3);
    let gamma = uniform(Shape::vector(3), 4);
    let beta = uniform(Shape::vector(3), 5);
    let stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    let mut labels = LabelMap::new(2, 6, 6, (0..72).map(|i| (i * 7 % 4) as u8).collect()).expect("72 labels");
    labels.set(0, 2, 3, 255);
    labels.set(1, 0, 0, 255);
    vec![
        (
            "conv2d",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(1, 1, 1))?;
                probe(t, y, 10)
            }),
            vec![x.clone(), w.clone(), b.clone()],
        ),
        (
            "conv2d (stride 2, dilation 2)",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 2, 2))?;
                probe(t, y, 11)
            }),
            vec![x.clone(), w.clone(), b.clone()],
        ),
        (
            "conv2d (dilation 3, taps past the border)",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], None, ConvGeom::new(1, 3, 3))?;
                probe(t, y, 12)
            }),
            vec![x.clone(), w.clone()],
        ),
        (
            "conv_transpose2d",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.conv_transpose2d(v[0], v[1], 2, 1, 1)?;
                probe(t, y, 13)
            }),
            vec![uniform(Shape::new(2, 4, 3, 3), 14), uniform(Shape::new(4, 2, 3, 3), 15)],
        ),
        (
            "batch_norm (train)",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
                probe(t, y, 16)
            }),
            vec![x.clone(), gamma.clone(), beta.clone()],
        ),
        (
            "batch_norm (eval)",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &stats)?;
                probe(t, y, 17)
            }),
            vec![x.clone(), gamma, beta],
        ),
        (
            "relu",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.relu(v[0]);
                probe(t, y, 18)
            }),
            vec![x.clone()],
        ),
        (
            "max_pool2d",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.max_pool2d(v[0], 3, 2, 1)?;
                probe(t, y, 19)
            }),
            vec![x.clone()],
        ),
        (
            "global_avg_pool",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.global_avg_pool(v[0]);
                probe(t, y, 20)
            }),
            vec![x.clone()],
        ),
        (
            "add",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                probe(t, y, 21)
            }),
            vec![x.clone(), uniform(x.shape(), 22)],
        ),
        (
            "mul",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y, 23)
            }),
            vec![x.clone(), uniform(x.shape(), 24)],
        ),
        (
            "scale",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.scale(v[0], -1.7);
                probe(t, y, 25)
            }),
            vec![x.clone()],
        ),
        (
            "concat_channels",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                probe(t, y, 26)
            }),
            vec![x.clone(), uniform(Shape::new(2, 2, 6, 6), 27)],
        ),
        (
            "bilinear_resize (up)",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.bilinear_resize(v[0], 11, 13)?;
                probe(t, y, 28)
            }),
            vec![x.clone()],
        ),
        (
            "bilinear_resize (down)",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                let y = t.bilinear_resize(v[0], 4, 3)?;
                probe(t, y, 29)
            }),
            vec![x.clone()],
        ),
        (
            "cross_entropy_2d",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy_2d(v[0], &labels, 255)),
            vec![uniform(Shape::new(2, 4, 6, 6), 30)],
        ),
    ]
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<GradCheckReport, TensorError>) -> Result<SuiteEntry> {
    let start = Instant::now();
    let report = f()?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Checks every primitive at [`OP_TOLERANCE`].
pub fn check_ops() -> Result<Vec<SuiteEntry>> {
    op_cases()
        .into_iter()
        .map(|(name, f, inputs)| {
            timed(name, OP_TOLERANCE, || {
                finite_diff_check_many(|t, v| f(t, v), &inputs, EPS)
            })
        })
        .collect()
}

/// Gradient of the total loss with respect to every registered parameter.
///
/// Batch norm runs on frozen statistics taken from one training-mode pass
/// over the same batch: in training mode, layers followed by BN are scale
/// invariant, which leaves coordinates with structurally zero gradient where
/// a relative error only measures round-off. Affine BN terms and biases are
/// randomised so that no parameter sits at a symmetric initial value.
pub fn check_model(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::build(cfg, seed)?;
    let (h, w) = cfg.input_hw;
    let k = cfg.num_classes;
    let x = uniform(Shape::new(batch, 3, h, w), seed ^ 0x5eed);
    let labels = LabelMap::new(batch, h, w, (0..batch * h * w).map(|i| ((i / 37) % k) as u8).collect())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (_, p) in model.registry_mut().iter_mut() {
        match p.kind {
            ParamKind::Weight => {}
            ParamKind::BnGamma => p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5)),
            _ => p
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5)),
        }
    }
    // calibrate running statistics on this batch
    let mut tape = Tape::<f64>::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let mut ctx = model.context(&mut tape, &params, true);
    model.forward(&mut ctx, xv)?;
    let updates = std::mem::take(&mut ctx.bn_updates);
    for (id, s) in updates {
        let stats = model.registry_mut().stats_mut(id);
        stats.mean = s.mean.iter().map(|&v| v as f32).collect();
        stats.var = s.var.iter().map(|&v| v as f32).collect();
    }

    let inputs: Vec<Tensor<f64>> = model.registry().iter().map(|(_, p)| p.value.cast()).collect();
    Ok(finite_diff_check_many(
        |tape, ps| {
            let xv = tape.constant(x.clone());
            let mut ctx = model.context(tape, ps, false);
            let out = model.forward(&mut ctx, xv)?;
            Ok(model.total_loss(tape, &out, &labels, 255)?.total)
        },
        &inputs,
        EPS,
    )?)
}

/// Configuration of the end-to-end check: base width 8, 5 classes, 32x32,
/// with a 4-channel stem so that inner widths (floored at the stem width)
/// stay small enough for a coordinate-by-coordinate check.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        stem_width: 4,
        ..ModelConfig::toy(8, 5, (32, 32))
    }
}

/// Runs the checks selected by `scale`.
pub fn run_suite(scale: SuiteScale) -> Result<Vec<SuiteEntry>> {
    let mut entries = check_ops()?;
    if scale == SuiteScale::Full {
        entries.push(timed_model()?);
    }
    Ok(entries)
}

fn timed_model() -> Result<SuiteEntry> {
    let start = Instant::now();
    let report = check_model(&model_check_config(), 2, 1)?;
    Ok(SuiteEntry {
        name: "end-to-end network (base width 8, 32x32)".into(),
        report,
        tolerance: MODEL_TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    })
}
