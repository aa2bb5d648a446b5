use super::kernels::{self, ConvGeom, LinearTaps};
use super::{geometry_err, shape_err, Element, LabelMap, RunningStats, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        g: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Bilinear {
        x: Var,
        ty: LinearTaps<T>,
        tx: LinearTaps<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: LabelMap,
        ignore: u8,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation; `w` is `(Cout, Cin, kh, kw)`, `b` is `(Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let os = kernels::conv2d_out_shape(xs, ws, g)?;
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(shape_err(
                    "conv2d",
                    format!("bias has {} entries for {} output channels", bs.numel(), ws.n),
                ));
            }
        }
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws,
            b.map(|b| self.value(b).data()),
            g,
            os,
        );
        let value = Tensor::new(os, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, &inputs))
    }

    /// Transposed convolution; `w` is `(Cin, Cout, kh, kw)`. The output is
    /// `(H-1)*stride - 2*padding + kh + output_padding` on each axis.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(geometry_err("conv_transpose2d", "stride must be >= 1"));
        }
        if xs.c != ws.n {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input has {} channels but weight {} expects {}", xs.c, ws, ws.n),
            ));
        }
        if output_padding >= stride {
            return Err(geometry_err(
                "conv_transpose2d",
                format!("output padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let full = |len: usize, k: usize| ((len - 1) * stride + k + output_padding) as isize - 2 * padding as isize;
        let (oh, ow) = (full(xs.h, ws.h), full(xs.w, ws.w));
        if oh <= 0 || ow <= 0 {
            return Err(geometry_err(
                "conv_transpose2d",
                format!("input {xs} with kernel {}x{} gives an empty output", ws.h, ws.w),
            ));
        }
        let os = Shape::new(xs.n, ws.c, oh as usize, ow as usize);
        let g = ConvGeom::new(stride, padding, 1);
        let data = kernels::conv2d_backward_input(self.value(x).data(), xs, self.value(w).data(), ws, g, os);
        let value = Tensor::new(os, data)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, g }, &[x, w]))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<Shape, TensorError> {
        let xs = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).numel() != xs.c {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} has {} entries for {} channels", self.shape(v).numel(), xs.c),
                ));
            }
        }
        Ok(xs)
    }

    fn affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let plane = xs.plane();
        let eps = super::BN_EPS;
        let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut out = vec![T::zero(); xs.numel()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = (n * xs.c + c) * plane;
                for i in base..base + plane {
                    let h = (xv[i] - mean_t[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch norm normalising by this batch's per-channel statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats), TensorError> {
        let xs = self.check_affine(x, gamma, beta)?;
        let plane = xs.plane();
        let count = (xs.n * plane) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; xs.c];
        let mut var = vec![0.0f64; xs.c];
        for c in 0..xs.c {
            let mut s = 0.0;
            for n in 0..xs.n {
                let base = (n * xs.c + c) * plane;
                s += xv[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = s / count;
            let mut sq = 0.0;
            for n in 0..xs.n {
                let base = (n * xs.c + c) * plane;
                sq += xv[base..base + plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / count;
        }
        let unbiased_var = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let out = self.affine(x, gamma, beta, &mean, &var, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                unbiased_var,
            },
        ))
    }

    /// Batch norm using fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats) -> Result<Var, TensorError> {
        let xs = self.check_affine(x, gamma, beta)?;
        if stats.mean.len() != xs.c || stats.var.len() != xs.c {
            return Err(shape_err(
                "batch_norm",
                format!("running stats have {} channels for {} channels", stats.mean.len(), xs.c),
            ));
        }
        let mean: Vec<f64> = stats.mean.iter().map(|&v| v as f64).collect();
        let var: Vec<f64> = stats.var.iter().map(|&v| v as f64).collect();
        self.affine(x, gamma, beta, &mean, &var, false)
    }

    /// Batch norm in either mode; training mode also folds the batch
    /// statistics into `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        train: bool,
    ) -> Result<Var, TensorError> {
        if train {
            let (out, batch) = self.batch_norm_train(x, gamma, beta)?;
            if stats.mean.len() != batch.mean.len() {
                return Err(shape_err("batch_norm", "running stats channel mismatch"));
            }
            stats.update(&batch, super::BN_MOMENTUM);
            Ok(out)
        } else {
            self.batch_norm_eval(x, gamma, beta, stats)
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = {
            let t = self.value(x);
            let data = t
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            Tensor::new(t.shape(), data).expect("same shape")
        };
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let g = ConvGeom::new(stride, padding, 1);
        g.validate("max_pool2d")?;
        if k == 0 || 2 * padding > k {
            return Err(geometry_err(
                "max_pool2d",
                format!("padding {padding} must be at most half of kernel {k}"),
            ));
        }
        let (oh, ow) = match (g.out_len(xs.h, k), g.out_len(xs.w, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(geometry_err(
                    "max_pool2d",
                    format!("input {xs} too small for kernel {k}"),
                ))
            }
        };
        let os = Shape::new(xs.n, xs.c, oh, ow);
        let (data, argmax) = kernels::max_pool2d_forward(self.value(x).data(), xs, k, g, os);
        let value = Tensor::new(os, data)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let inv = T::from_f64(1.0 / xs.plane() as f64);
        let data = self
            .value(x)
            .data()
            .chunks(xs.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(Shape::new(xs.n, xs.c, 1, 1), data).expect("pooled shape");
        self.push(value, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", format!("{sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", format!("{sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| v * factor).collect()).expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(shape_err("concat_channels", format!("{s} vs {first}")));
            }
            channels += s.c;
        }
        let os = Shape::new(first.n, channels, first.h, first.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape().c * first.plane();
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let value = Tensor::new(os, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Bilinear resize with half-pixel (align-corners-false) sampling and
    /// edge clamping. Equal sizes copy the input bit for bit.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(geometry_err("bilinear_resize", format!("output {out_h}x{out_w}")));
        }
        let xs = self.shape(x);
        let os = Shape::new(xs.n, xs.c, out_h, out_w);
        let ty = kernels::linear_taps::<T>(xs.h, out_h);
        let tx = kernels::linear_taps::<T>(xs.w, out_w);
        let value = if os == xs {
            self.value(x).clone()
        } else {
            Tensor::new(os, kernels::bilinear_forward(self.value(x).data(), xs, &ty, &tx, os))?
        };
        Ok(self.push(value, Op::Bilinear { x, ty, tx }, &[x]))
    }

    /// Mean softmax cross-entropy over pixels whose label is not `ignore`.
    /// When every pixel is ignored the loss is zero with a zero gradient.
    pub fn cross_entropy_2d(&mut self, logits: Var, labels: &LabelMap, ignore: u8) -> Result<Var, TensorError> {
        let ls = self.shape(logits);
        if (labels.n, labels.h, labels.w) != (ls.n, ls.h, ls.w) {
            return Err(shape_err(
                "cross_entropy_2d",
                format!("logits {ls} vs labels ({}, {}, {})", labels.n, labels.h, labels.w),
            ));
        }
        let k = ls.c;
        let plane = ls.plane();
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); ls.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for n in 0..ls.n {
            let base = n * k * plane;
            for p in 0..plane {
                let label = labels.data[n * plane + p];
                if label != ignore && label as usize >= k {
                    return Err(TensorError::Label {
                        label,
                        n,
                        y: p / ls.w,
                        x: p % ls.w,
                        classes: k,
                    });
                }
                let mut m = lv[base + p];
                for c in 1..k {
                    m = m.max(lv[base + c * plane + p]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (lv[base + c * plane + p] - m).exp();
                    probs[base + c * plane + p] = e;
                    z = z + e;
                }
                for c in 0..k {
                    let i = base + c * plane + p;
                    probs[i] = probs[i] / z;
                }
                if label != ignore {
                    let logit = lv[base + label as usize * plane + p];
                    total += (z.ln() + m - logit).as_f64();
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let value = Tensor::scalar(T::from_f64(loss));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.clone(),
                ignore,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`; every node is visited once, in
    /// reverse recording order, and fan-out gradients are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(TensorError::NonScalar(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let contributions = self.node_backward(node, g)?;
            for (v, dv) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], dv);
                }
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, g: geom } => {
                let (xs, ws, os) = (self.shape(*x), self.shape(*w), g.shape());
                let mut v = Vec::with_capacity(3);
                if self.requires_grad(*x) {
                    let dx = kernels::conv2d_backward_input(gd, os, self.value(*w).data(), ws, *geom, xs);
                    v.push((*x, Tensor::new(xs, dx)?));
                }
                if self.requires_grad(*w) {
                    let dw = kernels::conv2d_backward_weight(self.value(*x).data(), xs, gd, os, ws, *geom);
                    v.push((*w, Tensor::new(ws, dw)?));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = kernels::channel_sums(gd, os);
                        v.push((*b, Tensor::new(self.shape(*b), db)?));
                    }
                }
                v
            }
            Op::ConvTranspose2d { x, w, g: geom } => {
                // y = conv2d_backward_input(x, w): the adjoint of conv2d with
                // the same weight, so its input gradient is a plain conv2d.
                let (xs, ws, os) = (self.shape(*x), self.shape(*w), g.shape());
                let mut v = Vec::with_capacity(2);
                if self.requires_grad(*x) {
                    let dx = kernels::conv2d_forward(gd, os, self.value(*w).data(), ws, None, *geom, xs);
                    v.push((*x, Tensor::new(xs, dx)?));
                }
                if self.requires_grad(*w) {
                    let dw = kernels::conv2d_backward_weight(gd, os, self.value(*x).data(), xs, ws, *geom);
                    v.push((*w, Tensor::new(ws, dw)?));
                }
                v
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); xs.c];
                let mut dbeta = vec![T::zero(); xs.c];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let base = (n * xs.c + c) * plane;
                        for i in base..base + plane {
                            dgamma[c] = dgamma[c] + gd[i] * xhat[i];
                            dbeta[c] = dbeta[c] + gd[i];
                        }
                    }
                }
                let mut v = Vec::with_capacity(3);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); xs.numel()];
                    let m = T::from_f64((xs.n * plane) as f64);
                    for n in 0..xs.n {
                        for c in 0..xs.c {
                            let base = (n * xs.c + c) * plane;
                            let k = gamma_v[c] * inv_std[c];
                            for i in base..base + plane {
                                dx[i] = if *batch_stats {
                                    k * (gd[i] - (dbeta[c] + xhat[i] * dgamma[c]) / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    v.push((*x, Tensor::new(xs, dx)?));
                }
                let gs = self.shape(*gamma);
                v.push((*gamma, Tensor::new(gs, dgamma)?));
                v.push((*beta, Tensor::new(self.shape(*beta), dbeta)?));
                v
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&a, &d)| if a > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::new(self.shape(*x), dx)?)]
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.shape(*x);
                let mut dx = vec![T::zero(); xs.numel()];
                for (&i, &d) in argmax.iter().zip(gd) {
                    dx[i] = dx[i] + d;
                }
                vec![(*x, Tensor::new(xs, dx)?)]
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let inv = T::from_f64(1.0 / xs.plane() as f64);
                let mut dx = Vec::with_capacity(xs.numel());
                for &d in gd {
                    dx.extend(std::iter::repeat_n(d * inv, xs.plane()));
                }
                vec![(*x, Tensor::new(xs, dx)?)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = gd.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                let db = gd.iter().zip(av).map(|(&d, &x)| d * x).collect();
                vec![(*a, Tensor::new(g.shape(), da)?), (*b, Tensor::new(g.shape(), db)?)]
            }
            Op::Scale { x, factor } => {
                let dx = gd.iter().map(|&d| d * *factor).collect();
                vec![(*x, Tensor::new(g.shape(), dx)?)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), gd[0]))],
            Op::Concat { inputs } => {
                let os = g.shape();
                let plane = os.plane();
                let mut offset = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for &inp in inputs {
                    let s = self.shape(inp);
                    let mut d = Vec::with_capacity(s.numel());
                    for n in 0..os.n {
                        let start = (n * os.c + offset) * plane;
                        d.extend_from_slice(&gd[start..start + s.c * plane]);
                    }
                    offset += s.c;
                    v.push((inp, Tensor::new(s, d)?));
                }
                v
            }
            Op::Bilinear { x, ty, tx } => {
                let xs = self.shape(*x);
                if xs == g.shape() {
                    vec![(*x, g.clone())]
                } else {
                    let dx = kernels::bilinear_backward(gd, g.shape(), ty, tx, xs);
                    vec![(*x, Tensor::new(xs, dx)?)]
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                count,
            } => {
                let ls = self.shape(*logits);
                let mut dl = vec![T::zero(); ls.numel()];
                if *count > 0 {
                    let scale = gd[0] / T::from_f64(*count as f64);
                    let plane = ls.plane();
                    for n in 0..ls.n {
                        let base = n * ls.c * plane;
                        for p in 0..plane {
                            let label = labels.data[n * plane + p];
                            if label == *ignore {
                                continue;
                            }
                            for c in 0..ls.c {
                                let i = base + c * plane + p;
                                let onehot = if c == label as usize { T::one() } else { T::zero() };
                                dl[i] = (probs[i] - onehot) * scale;
                            }
                        }
                    }
                }
                vec![(*logits, Tensor::new(ls, dl)?)]
            }
        };
        Ok(out)
    }
}
