//! Building blocks of the network. Each layer stores parameter indices and
//! static metadata; values are bound onto a [`Tape`] per forward pass.

use crate::tensor::kernels::ConvGeom;
use crate::tensor::{BatchStats, Element, Shape, Tape, TensorError, Var};

use super::registry::{BnId, Builder, ParamId, ParamKind, ParamRegistry};

/// Per-pass state threaded through every layer.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    params: &'a [Var],
    registry: &'a ParamRegistry,
    train: bool,
    /// Batch statistics seen by each training-mode batch norm, in call order.
    pub bn_updates: Vec<(BnId, BatchStats)>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a [Var], registry: &'a ParamRegistry, train: bool) -> Self {
        Ctx {
            tape,
            params,
            registry,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
}

impl Conv {
    pub(crate) fn build(b: &mut Builder, cin: usize, cout: usize, kernel: usize, geom: ConvGeom, bias: bool) -> Self {
        let weight = b.weight("weight", Shape::new(cout, cin, kernel, kernel), cin * kernel * kernel);
        let bias = bias.then(|| b.constant("bias", cout, 0.0, ParamKind::Bias));
        Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
            geom,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + if self.bias.is_some() { self.cout } else { 0 }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
    pub channels: usize,
}

impl BatchNorm {
    pub(crate) fn build(b: &mut Builder, channels: usize) -> Self {
        b.scope("bn", |b| BatchNorm {
            gamma: b.constant("gamma", channels, 1.0, ParamKind::BnGamma),
            beta: b.constant("beta", channels, 0.0, ParamKind::BnBeta),
            stats: b.running_stats(channels),
            channels,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, g, b)?;
            ctx.bn_updates.push((self.stats, stats));
            Ok(y)
        } else {
            ctx.tape.batch_norm_eval(x, g, b, ctx.registry.stats(self.stats))
        }
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub(crate) fn build(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        relu: bool,
    ) -> Self {
        b.scope(name, |b| ConvBn {
            conv: Conv::build(b, cin, cout, kernel, geom, false),
            bn: BatchNorm::build(b, cout),
            relu,
        })
    }

    /// `kernel x kernel`, stride 1, dilation `d`, size-preserving padding.
    pub(crate) fn same(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, d: usize) -> Self {
        Self::build(
            b,
            name,
            cin,
            cout,
            kernel,
            ConvGeom::new(1, d * (kernel - 1) / 2, d),
            true,
        )
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }
}

/// ResNet bottleneck: 1x1 reduce, 3x3 (strided or dilated), 1x1 expand,
/// with a projection shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub conv3: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl Bottleneck {
    pub(crate) fn build(
        b: &mut Builder,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        floor: usize,
    ) -> Self {
        let mid = bottleneck_mid_width(cout, floor);
        let conv1 = ConvBn::build(b, "conv1", cin, mid, 1, ConvGeom::new(1, 0, 1), true);
        let conv2 = ConvBn::build(b, "conv2", mid, mid, 3, ConvGeom::new(stride, dilation, dilation), true);
        let conv3 = ConvBn::build(b, "conv3", mid, cout, 1, ConvGeom::new(1, 0, 1), false);
        let shortcut = (cin != cout || stride != 1)
            .then(|| ConvBn::build(b, "shortcut", cin, cout, 1, ConvGeom::new(stride, 0, 1), false));
        Bottleneck {
            conv1,
            conv2,
            conv3,
            shortcut,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let y = self.conv3.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        Ok(ctx.tape.relu(sum))
    }
}

/// Atrous spatial pyramid pooling that returns as many channels as it takes.
///
/// `Cb -> Cb/2` (1x1), then parallel branches on the reduced map (one 1x1
/// and one 3x3 per dilation, each to `Cb/8`), an optional image-pooling
/// branch, concatenation, and a 1x1 projection back to `Cb`.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub reduce: ConvBn,
    pub branches: Vec<ConvBn>,
    pub pool: Option<Conv>,
    pub project: ConvBn,
}

impl Aspp {
    pub(crate) fn build(b: &mut Builder, width: usize, dilations: &[usize], pool_branch: bool) -> Self {
        let half = width / 2;
        let branch = width / 8;
        let reduce = ConvBn::same(b, "reduce", width, half, 1, 1);
        let mut branches = vec![ConvBn::same(b, "branch0", half, branch, 1, 1)];
        for (i, &d) in dilations.iter().enumerate() {
            branches.push(ConvBn::same(b, &format!("branch{}", i + 1), half, branch, 3, d));
        }
        // image-level features have a 1x1 extent, so no batch norm here
        let pool = pool_branch.then(|| {
            b.scope("pool", |b| {
                Conv::build(b, half, branch, 1, ConvGeom::new(1, 0, 1), true)
            })
        });
        let concat = branch * (branches.len() + usize::from(pool_branch));
        let project = ConvBn::same(b, "project", concat, width, 1, 1);
        Aspp {
            reduce,
            branches,
            pool,
            project,
        }
    }

    /// Channel counts along the pipeline: input, reduced, per-branch,
    /// concatenated, output.
    pub fn channel_trace(&self) -> [usize; 5] {
        [
            self.reduce.conv.cin,
            self.reduce.conv.cout,
            self.branches[0].conv.cout,
            self.project.conv.cin,
            self.project.conv.cout,
        ]
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let s = ctx.tape.shape(x);
        if s.c != self.reduce.conv.cin {
            return Err(TensorError::Shape {
                op: "aspp",
                detail: format!("expected {} channels, got {}", self.reduce.conv.cin, s.c),
            });
        }
        let r = self.reduce.forward(ctx, x)?;
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for br in &self.branches {
            outs.push(br.forward(ctx, r)?);
        }
        if let Some(pool) = &self.pool {
            let g = ctx.tape.global_avg_pool(r);
            let g = pool.forward(ctx, g)?;
            let g = ctx.tape.relu(g);
            outs.push(ctx.tape.bilinear_resize(g, s.h, s.w)?);
        }
        let cat = ctx.tape.concat_channels(&outs)?;
        self.project.forward(ctx, cat)
    }
}

/// Baseline centre block: serial 3x3 convolutions dilated 1, 2, 4 whose
/// outputs are summed with their input, on a `Cb/8` bottleneck, added back
/// onto the block input.
#[derive(Clone, Debug)]
pub struct DilatedBlock {
    pub reduce: ConvBn,
    pub dilated: Vec<ConvBn>,
    pub expand: ConvBn,
}

impl DilatedBlock {
    pub(crate) fn build(b: &mut Builder, width: usize) -> Self {
        let inner = width / 8;
        let reduce = ConvBn::same(b, "reduce", width, inner, 1, 1);
        let dilated = [1, 2, 4]
            .iter()
            .map(|&d| ConvBn::same(b, &format!("dilate{d}"), inner, inner, 3, d))
            .collect();
        let expand = ConvBn::build(b, "expand", inner, width, 1, ConvGeom::new(1, 0, 1), false);
        DilatedBlock {
            reduce,
            dilated,
            expand,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let r = self.reduce.forward(ctx, x)?;
        let mut cur = r;
        let mut acc = r;
        for conv in &self.dilated {
            cur = conv.forward(ctx, cur)?;
            acc = ctx.tape.add(acc, cur)?;
        }
        let e = self.expand.forward(ctx, acc)?;
        ctx.tape.add(x, e)
    }
}

/// Middle stage of a decoder block.
#[derive(Clone, Debug)]
pub enum DecoderMiddle {
    /// 3x3 transposed convolution, stride 2, exactly doubling the size.
    Upsample {
        weight: ParamId,
        bn: BatchNorm,
        channels: usize,
    },
    /// 3x3 stride-1 convolution.
    Same(ConvBn),
}

/// LinkNet decoder unit: 1x1 to a quarter of the channels, a 3x3 (transposed)
/// convolution, then 1x1 to the output width.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub reduce: ConvBn,
    pub middle: DecoderMiddle,
    pub expand: ConvBn,
}

// Inner widths never drop below `floor`, which the model sets to the stem
// width. In a ResNet the first stage's inner width equals the stem's, so at
// paper scale the floor never binds; at toy scale a plain quarter would
// leave 1-2 channel layers that starve the fine-resolution path.

/// Quarter width of a decoder block input, at least `floor`.
pub fn decoder_mid_width(cin: usize, floor: usize) -> usize {
    (cin / 4).max(floor).max(1)
}

/// Quarter width of a bottleneck output, at least `floor`.
pub fn bottleneck_mid_width(cout: usize, floor: usize) -> usize {
    (cout / 4).max(floor).max(1)
}

impl DecoderBlock {
    pub(crate) fn build(b: &mut Builder, cin: usize, cout: usize, upsample: bool, floor: usize) -> Self {
        let mid = decoder_mid_width(cin, floor);
        let reduce = ConvBn::same(b, "reduce", cin, mid, 1, 1);
        let middle = if upsample {
            b.scope("deconv", |b| DecoderMiddle::Upsample {
                weight: b.weight("weight", Shape::new(mid, mid, 3, 3), mid * 9),
                bn: BatchNorm::build(b, mid),
                channels: mid,
            })
        } else {
            DecoderMiddle::Same(ConvBn::same(b, "conv", mid, mid, 3, 1))
        };
        let expand = ConvBn::same(b, "expand", mid, cout, 1, 1);
        DecoderBlock { reduce, middle, expand }
    }

    pub fn upsamples(&self) -> bool {
        matches!(self.middle, DecoderMiddle::Upsample { .. })
    }

    /// Channel counts: input, quarter, quarter, output.
    pub fn channel_trace(&self) -> [usize; 4] {
        let mid = self.reduce.conv.cout;
        [self.reduce.conv.cin, mid, mid, self.expand.conv.cout]
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.reduce.forward(ctx, x)?;
        let y = match &self.middle {
            DecoderMiddle::Upsample { weight, bn, .. } => {
                let w = ctx.param(*weight);
                let y = ctx.tape.conv_transpose2d(y, w, 2, 1, 1)?;
                let y = bn.forward(ctx, y)?;
                ctx.tape.relu(y)
            }
            DecoderMiddle::Same(conv) => conv.forward(ctx, y)?,
        };
        self.expand.forward(ctx, y)
    }
}

/// Two channel-preserving 3x3 convolutions, a 1x1 classifier, and a bilinear
/// resize to the label size.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub classifier: Conv,
}

impl Head {
    pub(crate) fn build(b: &mut Builder, channels: usize, classes: usize) -> Self {
        Head {
            conv1: ConvBn::same(b, "conv1", channels, channels, 3, 1),
            conv2: ConvBn::same(b, "conv2", channels, channels, 3, 1),
            classifier: b.scope("classifier", |b| {
                Conv::build(b, channels, classes, 1, ConvGeom::new(1, 0, 1), true)
            }),
        }
    }

    /// Logits at the feature resolution, before resizing.
    pub fn logits<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var, TensorError> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        self.classifier.forward(ctx, y)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var, out_hw: (usize, usize)) -> Result<Var, TensorError> {
        let y = self.logits(ctx, x)?;
        ctx.tape.bilinear_resize(y, out_hw.0, out_hw.1)
    }
}
