//! The parsing network: a ResNet-style encoder, an ASPP (or dilated) centre
//! block, a LinkNet decoder with encoder skips, an optional Smooth refiner
//! and optional deep-supervision heads.

mod config;
mod layers;
mod registry;

pub use config::{ConfigError, ModelConfig};
pub use layers::{
    bottleneck_mid_width, decoder_mid_width, Aspp, BatchNorm, Bottleneck, Conv, ConvBn, Ctx, DecoderBlock,
    DecoderMiddle, DilatedBlock, Head,
};
pub use registry::{BnId, Param, ParamId, ParamKind, ParamRegistry};

use crate::tensor::kernels::ConvGeom;
use crate::tensor::{BatchStats, Element, LabelMap, Tape, Tensor, TensorError, Var, BN_MOMENTUM};
use registry::Builder;

/// Stem, max-pool and the four residual stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBn,
    /// E2, E3, E4, E5.
    pub stages: Vec<Vec<Bottleneck>>,
}

impl Encoder {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let stem = ConvBn::build(b, "E1", 3, cfg.stem_width, 7, ConvGeom::new(2, 3, 1), true);
        let widths = cfg.stage_widths();
        // (stride of the first block, dilation of the 3x3 convs)
        let layout = [(1, 1), (2, 1), (2, 1), (1, 2)];
        let mut cin = cfg.stem_width;
        let mut stages = Vec::with_capacity(4);
        for (i, (&width, &(stride, dilation))) in widths.iter().zip(&layout).enumerate() {
            let blocks = b.scope(format!("E{}", i + 2), |b| {
                (0..cfg.encoder_blocks[i])
                    .map(|j| {
                        let s = if j == 0 { stride } else { 1 };
                        let c = if j == 0 { cin } else { width };
                        b.scope(format!("block{j}"), |b| {
                            Bottleneck::build(b, c, width, s, dilation, cfg.stem_width)
                        })
                    })
                    .collect()
            });
            stages.push(blocks);
            cin = width;
        }
        Encoder { stem, stages }
    }
}

/// Block between encoder and decoder.
#[derive(Clone, Debug)]
pub enum Center {
    Aspp(Aspp),
    Dilated(DilatedBlock),
}

/// D5, D4, D3, D2.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub d5: DecoderBlock,
    pub d4: DecoderBlock,
    pub d3: DecoderBlock,
    pub d2: DecoderBlock,
}

impl Decoder {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let [e2, e3, e4, e5] = cfg.stage_widths();
        Decoder {
            d5: b.scope("D5", |b| DecoderBlock::build(b, e5, e4, false, cfg.stem_width)),
            d4: b.scope("D4", |b| DecoderBlock::build(b, e4, e3, true, cfg.stem_width)),
            d3: b.scope("D3", |b| DecoderBlock::build(b, e3, e2, true, cfg.stem_width)),
            d2: b.scope("D2", |b| {
                DecoderBlock::build(b, e2, cfg.base_width / 8, false, cfg.stem_width)
            }),
        }
    }
}

/// Multi-level fusion: D5, D4 and D3 are brought to D2's resolution and
/// width by chains of decoder blocks, concatenated with D2, blended by two
/// 3x3 convolutions and classified.
#[derive(Clone, Debug)]
pub struct Smooth {
    /// Projection chains for D5, D4 and D3.
    pub chains: [Vec<DecoderBlock>; 3],
    pub blend1: ConvBn,
    pub blend2: ConvBn,
    pub classifier: Conv,
}

impl Smooth {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let [e2, e3, e4, _] = cfg.stage_widths();
        let target = cfg.base_width / 8;
        let chain = |b: &mut Builder, name: &str, steps: &[(usize, usize, bool)]| -> Vec<DecoderBlock> {
            b.scope(name, |b| {
                steps
                    .iter()
                    .enumerate()
                    .map(|(i, &(cin, cout, up))| {
                        b.scope(format!("block{i}"), |b| {
                            DecoderBlock::build(b, cin, cout, up, cfg.stem_width)
                        })
                    })
                    .collect()
            })
        };
        let chains = [
            chain(b, "from_D5", &[(e4, e3, true), (e3, target, true)]),
            chain(b, "from_D4", &[(e3, target, true)]),
            chain(b, "from_D3", &[(e2, target, false)]),
        ];
        let fused = 4 * target;
        let width = cfg.base_width / 4;
        Smooth {
            chains,
            blend1: ConvBn::same(b, "blend1", fused, width, 3, 1),
            blend2: ConvBn::same(b, "blend2", width, width, 3, 1),
            classifier: b.scope("classifier", |b| {
                Conv::build(b, width, cfg.num_classes, 1, ConvGeom::new(1, 0, 1), true)
            }),
        }
    }

    /// Output width of the two blending convolutions.
    pub fn blend_width(&self) -> usize {
        self.blend2.conv.cout
    }

    fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<T>,
        d: &DecoderFeatures,
        out_hw: (usize, usize),
    ) -> Result<Var, TensorError> {
        let mut maps = Vec::with_capacity(4);
        for (chain, &start) in self.chains.iter().zip(&[d.d5, d.d4, d.d3]) {
            let mut cur = start;
            for block in chain {
                cur = block.forward(ctx, cur)?;
            }
            maps.push(cur);
        }
        maps.push(d.d2);
        let cat = ctx.tape.concat_channels(&maps)?;
        let y = self.blend1.forward(ctx, cat)?;
        let y = self.blend2.forward(ctx, y)?;
        let y = self.classifier.forward(ctx, y)?;
        ctx.tape.bilinear_resize(y, out_hw.0, out_hw.1)
    }
}

/// Produces the main logits.
#[derive(Clone, Debug)]
pub enum Refiner {
    Smooth(Smooth),
    /// A plain head on D2.
    Plain(Head),
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    /// E1..E5.
    pub e: [Var; 5],
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderFeatures {
    pub d5: Var,
    pub d4: Var,
    pub d3: Var,
    pub d2: Var,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub encoder: EncoderFeatures,
    pub center: Var,
    pub decoder: DecoderFeatures,
    /// `(N, K, H, W)` at the input resolution.
    pub main_logits: Var,
    /// Deep-supervision logits for D5, D4, D3, D2; empty without the
    /// multi-scale loss.
    pub aux_logits: Vec<Var>,
}

/// Loss components as tape nodes.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub aux: Vec<Var>,
}

/// `main + weight * sum(aux)`.
pub fn combine_losses<T: Element>(tape: &mut Tape<T>, main: Var, aux: &[Var], weight: f32) -> Result<Var, TensorError> {
    let Some((&first, rest)) = aux.split_first() else {
        return Ok(main);
    };
    let mut acc = first;
    for &a in rest {
        acc = tape.add(acc, a)?;
    }
    let scaled = tape.scale(acc, T::from_f32(weight));
    tape.add(main, scaled)
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    registry: ParamRegistry,
    pub encoder: Encoder,
    pub center: Center,
    pub decoder: Decoder,
    pub refiner: Refiner,
    pub aux_heads: Vec<Head>,
}

impl Model {
    /// Builds and initialises every parameter from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut registry = ParamRegistry::default();
        let mut b = Builder::new(&mut registry, seed);
        let encoder = b.scope("encoder", |b| Encoder::build(b, config));
        let center = if config.use_aspp {
            Center::Aspp(b.scope("aspp", |b| {
                Aspp::build(b, config.base_width, &config.aspp_dilations, config.aspp_pool_branch)
            }))
        } else {
            Center::Dilated(b.scope("dblock", |b| DilatedBlock::build(b, config.base_width)))
        };
        let decoder = b.scope("decoder", |b| Decoder::build(b, config));
        let refiner = if config.use_smooth {
            Refiner::Smooth(b.scope("smooth", |b| Smooth::build(b, config)))
        } else {
            Refiner::Plain(b.scope("head", |b| Head::build(b, config.base_width / 8, config.num_classes)))
        };
        let aux_heads = if config.use_multiscale_loss {
            let [e2, e3, e4, _] = config.stage_widths();
            let chans = [("D5", e4), ("D4", e3), ("D3", e2), ("D2", config.base_width / 8)];
            chans
                .iter()
                .map(|&(name, c)| b.scope(format!("aux.{name}"), |b| Head::build(b, c, config.num_classes)))
                .collect()
        } else {
            Vec::new()
        };
        drop(b);
        Ok(Model {
            config: config.clone(),
            registry,
            encoder,
            center,
            decoder,
            refiner,
            aux_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry {
        &mut self.registry
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.registry.count()
    }

    /// Channel trace of the ASPP block, if present.
    pub fn aspp_channel_trace(&self) -> Option<[usize; 5]> {
        match &self.center {
            Center::Aspp(a) => Some(a.channel_trace()),
            Center::Dilated(_) => None,
        }
    }

    /// Places every parameter on `tape` as a leaf, in registry order.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.registry
            .iter()
            .map(|(_, p)| tape.leaf(p.value.cast(), requires_grad))
            .collect()
    }

    pub fn context<'a, T: Element>(&'a self, tape: &'a mut Tape<T>, params: &'a [Var], train: bool) -> Ctx<'a, T> {
        Ctx::new(tape, params, &self.registry, train)
    }

    pub fn encoder_forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<EncoderFeatures, TensorError> {
        let s = ctx.tape.shape(x);
        if s.c != 3 {
            return Err(TensorError::Shape {
                op: "encoder",
                detail: format!("expected 3 input channels, got {}", s.c),
            });
        }
        let e1 = self.encoder.stem.forward(ctx, x)?;
        let mut cur = ctx.tape.max_pool2d(e1, 3, 2, 1)?;
        let mut e = [e1; 5];
        for (i, stage) in self.encoder.stages.iter().enumerate() {
            for block in stage {
                cur = block.forward(ctx, cur)?;
            }
            e[i + 1] = cur;
        }
        Ok(EncoderFeatures { e })
    }

    pub fn center_forward<T: Element>(&self, ctx: &mut Ctx<T>, e5: Var) -> Result<Var, TensorError> {
        match &self.center {
            Center::Aspp(a) => a.forward(ctx, e5),
            Center::Dilated(d) => d.forward(ctx, e5),
        }
    }

    pub fn decoder_forward<T: Element>(
        &self,
        ctx: &mut Ctx<T>,
        enc: &EncoderFeatures,
        center: Var,
    ) -> Result<DecoderFeatures, TensorError> {
        let [_, e2, e3, e4, _] = enc.e;
        let dec = &self.decoder;
        let y = dec.d5.forward(ctx, center)?;
        let d5 = ctx.tape.add(y, e4)?;
        let y = dec.d4.forward(ctx, d5)?;
        let d4 = ctx.tape.add(y, e3)?;
        let y = dec.d3.forward(ctx, d4)?;
        let d3 = ctx.tape.add(y, e2)?;
        let d2 = dec.d2.forward(ctx, d3)?;
        Ok(DecoderFeatures { d5, d4, d3, d2 })
    }

    /// Main logits from the decoder maps: the Smooth fusion when enabled,
    /// otherwise a plain head on D2.
    pub fn refine<T: Element>(
        &self,
        ctx: &mut Ctx<T>,
        dec: &DecoderFeatures,
        out_hw: (usize, usize),
    ) -> Result<Var, TensorError> {
        match &self.refiner {
            Refiner::Smooth(sm) => sm.forward(ctx, dec, out_hw),
            Refiner::Plain(head) => head.forward(ctx, dec.d2, out_hw),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<ModelOutputs, TensorError> {
        let s = ctx.tape.shape(x);
        if !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) || s.h == 0 || s.w == 0 {
            return Err(TensorError::Shape {
                op: "model",
                detail: format!("input {}x{} is not a positive multiple of 16", s.h, s.w),
            });
        }
        let out_hw = (s.h, s.w);
        let encoder = self.encoder_forward(ctx, x)?;
        let center = self.center_forward(ctx, encoder.e[4])?;
        let decoder = self.decoder_forward(ctx, &encoder, center)?;
        let main_logits = self.refine(ctx, &decoder, out_hw)?;
        let mut aux_logits = Vec::with_capacity(self.aux_heads.len());
        for (head, &f) in self
            .aux_heads
            .iter()
            .zip(&[decoder.d5, decoder.d4, decoder.d3, decoder.d2])
        {
            aux_logits.push(head.forward(ctx, f, out_hw)?);
        }
        Ok(ModelOutputs {
            encoder,
            center,
            decoder,
            main_logits,
            aux_logits,
        })
    }

    /// Cross-entropy on the main and auxiliary logits, combined with the
    /// configured auxiliary weight.
    pub fn total_loss<T: Element>(
        &self,
        tape: &mut Tape<T>,
        out: &ModelOutputs,
        labels: &LabelMap,
        ignore: u8,
    ) -> Result<LossTerms, TensorError> {
        let main = tape.cross_entropy_2d(out.main_logits, labels, ignore)?;
        let aux = out
            .aux_logits
            .iter()
            .map(|&l| tape.cross_entropy_2d(l, labels, ignore))
            .collect::<Result<Vec<_>, _>>()?;
        let total = combine_losses(tape, main, &aux, self.config.aux_loss_weight)?;
        Ok(LossTerms { total, main, aux })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(BnId, BatchStats)]) {
        for (id, stats) in updates {
            self.registry.stats_mut(*id).update(stats, BN_MOMENTUM);
        }
    }

    /// Main logits in inference mode (running BN statistics).
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut ctx = self.context(&mut tape, &params, false);
        let out = self.forward(&mut ctx, xv)?;
        let logits = out.main_logits;
        Ok(tape.value(logits).clone())
    }
}
