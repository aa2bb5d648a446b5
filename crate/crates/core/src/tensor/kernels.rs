//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! Every kernel parallelises over independent output planes only, and each
//! output element is reduced in a fixed order, so results are bit-identical
//! for any rayon worker count.

use rayon::prelude::*;

use super::{geometry_err, shape_err, Element, Shape, TensorError};

/// Stride, zero padding and dilation of a 2-D convolution (same on both axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
        }
    }

    /// `floor((len + 2p - d(k-1) - 1) / s) + 1`, or `None` when empty.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<(), TensorError> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(geometry_err(
                op,
                format!("stride {} and dilation {} must be >= 1", self.stride, self.dilation),
            ));
        }
        Ok(())
    }
}

/// Output shape of `conv2d(x, w)` where `w` is `(Cout, Cin, kh, kw)`.
pub fn conv2d_out_shape(x: Shape, w: Shape, g: ConvGeom) -> Result<Shape, TensorError> {
    g.validate("conv2d")?;
    if x.c != w.c {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels but weight {} expects {}", x.c, w, w.c),
        ));
    }
    let oh = g.out_len(x.h, w.h);
    let ow = g.out_len(x.w, w.w);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Shape::new(x.n, w.n, oh, ow)),
        _ => Err(geometry_err(
            "conv2d",
            format!("input {x} with kernel {}x{} and {g:?} gives an empty output", w.h, w.w),
        )),
    }
}

/// Half-open range of output positions whose tap `o*stride + offset` lands
/// inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.min(out_len as isize) as usize;
    let hi = hi.clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Element>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    g: ConvGeom,
    os: Shape,
) -> Vec<T> {
    let (cin, kh, kw) = (ws.c, ws.h, ws.w);
    let (s, p, d) = (g.stride, g.padding as isize, g.dilation);
    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(os.plane()).enumerate().for_each(|(idx, plane)| {
        let (n, co) = (idx / os.c, idx % os.c);
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..cin {
            let xp = &x[(n * xs.c + ci) * xs.plane()..][..xs.plane()];
            for ky in 0..kh {
                let offy = (ky * d) as isize - p;
                let (oy0, oy1) = valid_range(os.h, xs.h, s, offy);
                for kx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    let offx = (kx * d) as isize - p;
                    let (ox0, ox1) = valid_range(os.w, xs.w, s, offx);
                    for oy in oy0..oy1 {
                        let iy = (oy * s) as isize + offy;
                        let row = &xp[iy as usize * xs.w..][..xs.w];
                        let orow = &mut plane[oy * os.w..][..os.w];
                        for ox in ox0..ox1 {
                            let ix = ((ox * s) as isize + offx) as usize;
                            orow[ox] = orow[ox] + wv * row[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of `conv2d` with respect to its input. This is also the forward
/// pass of the transposed convolution with the same weight layout.
pub fn conv2d_backward_input<T: Element>(dy: &[T], os: Shape, w: &[T], ws: Shape, g: ConvGeom, xs: Shape) -> Vec<T> {
    let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let (s, p, d) = (g.stride, g.padding as isize, g.dilation);
    let mut dx = vec![T::zero(); xs.numel()];
    dx.par_chunks_mut(xs.plane()).enumerate().for_each(|(idx, plane)| {
        let (n, ci) = (idx / xs.c, idx % xs.c);
        for co in 0..cout {
            let gp = &dy[(n * os.c + co) * os.plane()..][..os.plane()];
            for ky in 0..kh {
                let offy = (ky * d) as isize - p;
                let (oy0, oy1) = valid_range(os.h, xs.h, s, offy);
                for kx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    let offx = (kx * d) as isize - p;
                    let (ox0, ox1) = valid_range(os.w, xs.w, s, offx);
                    for oy in oy0..oy1 {
                        let iy = ((oy * s) as isize + offy) as usize;
                        let grow = &gp[oy * os.w..][..os.w];
                        let row = &mut plane[iy * xs.w..][..xs.w];
                        for ox in ox0..ox1 {
                            let ix = ((ox * s) as isize + offx) as usize;
                            row[ix] = row[ix] + wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_backward_weight<T: Element>(x: &[T], xs: Shape, dy: &[T], os: Shape, ws: Shape, g: ConvGeom) -> Vec<T> {
    let (cin, kh, kw) = (ws.c, ws.h, ws.w);
    let (s, p, d) = (g.stride, g.padding as isize, g.dilation);
    let mut dw = vec![T::zero(); ws.numel()];
    dw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, filt)| {
        for ci in 0..cin {
            for ky in 0..kh {
                let offy = (ky * d) as isize - p;
                let (oy0, oy1) = valid_range(os.h, xs.h, s, offy);
                for kx in 0..kw {
                    let offx = (kx * d) as isize - p;
                    let (ox0, ox1) = valid_range(os.w, xs.w, s, offx);
                    let mut acc = T::zero();
                    for n in 0..xs.n {
                        let xp = &x[(n * xs.c + ci) * xs.plane()..][..xs.plane()];
                        let gp = &dy[(n * os.c + co) * os.plane()..][..os.plane()];
                        for oy in oy0..oy1 {
                            let iy = ((oy * s) as isize + offy) as usize;
                            let row = &xp[iy * xs.w..][..xs.w];
                            let grow = &gp[oy * os.w..][..os.w];
                            for ox in ox0..ox1 {
                                let ix = ((ox * s) as isize + offx) as usize;
                                acc = acc + grow[ox] * row[ix];
                            }
                        }
                    }
                    filt[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    dw
}

/// Per-channel sum over batch and space, used for bias gradients.
pub fn channel_sums<T: Element>(dy: &[T], s: Shape) -> Vec<T> {
    let mut out = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            let p = &dy[(n * s.c + c) * s.plane()..][..s.plane()];
            *o = p.iter().fold(*o, |acc, &v| acc + v);
        }
    }
    out
}

/// Max pooling; returns values and, per output element, the flat input index
/// of the first maximum in row-major window order.
pub fn max_pool2d_forward<T: Element>(x: &[T], xs: Shape, k: usize, g: ConvGeom, os: Shape) -> (Vec<T>, Vec<usize>) {
    let (s, p) = (g.stride, g.padding as isize);
    let mut out = vec![T::zero(); os.numel()];
    let mut arg = vec![0usize; os.numel()];
    out.par_chunks_mut(os.plane())
        .zip(arg.par_chunks_mut(os.plane()))
        .enumerate()
        .for_each(|(idx, (plane, aplane))| {
            let base = idx * xs.plane();
            let xp = &x[base..][..xs.plane()];
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let i = iy as usize * xs.w + ix as usize;
                            if best_i == usize::MAX || xp[i] > best {
                                best = xp[i];
                                best_i = i;
                            }
                        }
                    }
                    plane[oy * os.w + ox] = best;
                    aplane[oy * os.w + ox] = base + best_i;
                }
            }
        });
    (out, arg)
}

/// Source taps for one axis of an align-corners-false bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct LinearTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub(crate) fn linear_taps<T: Element>(in_len: usize, out_len: usize) -> LinearTaps<T> {
    let scale = in_len as f64 / out_len as f64;
    let mut taps = LinearTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(T::from_f64(src - lo as f64));
    }
    taps
}

pub(crate) fn bilinear_forward<T: Element>(
    x: &[T],
    xs: Shape,
    ty: &LinearTaps<T>,
    tx: &LinearTaps<T>,
    os: Shape,
) -> Vec<T> {
    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(os.plane()).enumerate().for_each(|(idx, plane)| {
        let xp = &x[idx * xs.plane()..][..xs.plane()];
        for oy in 0..os.h {
            let (r0, r1, fy) = (ty.lo[oy] * xs.w, ty.hi[oy] * xs.w, ty.frac[oy]);
            for ox in 0..os.w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = xp[r0 + c0] * (T::one() - fx) + xp[r0 + c1] * fx;
                let bot = xp[r1 + c0] * (T::one() - fx) + xp[r1 + c1] * fx;
                plane[oy * os.w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    });
    out
}

pub(crate) fn bilinear_backward<T: Element>(
    dy: &[T],
    os: Shape,
    ty: &LinearTaps<T>,
    tx: &LinearTaps<T>,
    xs: Shape,
) -> Vec<T> {
    let mut dx = vec![T::zero(); xs.numel()];
    dx.par_chunks_mut(xs.plane()).enumerate().for_each(|(idx, plane)| {
        let gp = &dy[idx * os.plane()..][..os.plane()];
        for oy in 0..os.h {
            let (r0, r1, fy) = (ty.lo[oy] * xs.w, ty.hi[oy] * xs.w, ty.frac[oy]);
            for ox in 0..os.w {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = gp[oy * os.w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[r0 + c0] = plane[r0 + c0] + gt * (T::one() - fx);
                plane[r0 + c1] = plane[r0 + c1] + gt * fx;
                plane[r1 + c0] = plane[r1 + c0] + gb * (T::one() - fx);
                plane[r1 + c1] = plane[r1 + c1] + gb * fx;
            }
        }
    });
    dx
}
