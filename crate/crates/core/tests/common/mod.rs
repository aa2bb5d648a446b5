//! Independent reference implementations shared by the integration suites.
//!
//! Everything here runs in `f64` with plain nested loops and deliberately
//! shares no code with the library kernels it is compared against.

#![allow(dead_code)]

use parsegrid_core::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Values in `[-1, -margin] ∪ [margin, 1]`, away from ReLU's kink.
pub fn random_away_from_zero(shape: Shape, seed: u64, margin: f64) -> Tensor<f64> {
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

/// Six nested loops over (n, co, oy, ox, ci, ky, kx) with explicit bounds.
pub fn conv2d_direct(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.h + 2 * padding - dilation * (ws.h - 1) - 1) / stride + 1;
    let ow = (xs.w + 2 * padding - dilation * (ws.w - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky * dilation) as i64 - padding as i64;
                                let ix = (ox * stride + kx * dilation) as i64 - padding as i64;
                                if iy < 0 || ix < 0 || iy >= xs.h as i64 || ix >= xs.w as i64 {
                                    continue;
                                }
                                acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.index(n, co, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution by scattering each input pixel through the kernel.
/// `w` is `(Cin, Cout, kh, kw)`.
pub fn conv_transpose2d_scatter(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let full_h = (xs.h - 1) * stride + ws.h + output_padding;
    let full_w = (xs.w - 1) * stride + ws.w + output_padding;
    let mut full = vec![0.0; xs.n * ws.c * full_h * full_w];
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for y in 0..xs.h {
                for x_ in 0..xs.w {
                    let v = x.at(n, ci, y, x_);
                    for co in 0..ws.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let oy = y * stride + ky;
                                let ox = x_ * stride + kx;
                                full[((n * ws.c + co) * full_h + oy) * full_w + ox] += v * w.at(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    let oh = full_h - 2 * padding;
    let ow = full_w - 2 * padding;
    Tensor::from_fn(Shape::new(xs.n, ws.c, oh, ow), |n, c, y, x_| {
        full[((n * ws.c + c) * full_h + y + padding) * full_w + x_ + padding]
    })
}

/// Half-pixel bilinear resize computed independently per output pixel.
pub fn bilinear_pixel(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let s = x.shape();
    let src = |i: usize, in_len: usize, out_len: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, pos - lo as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x_| {
        let (y0, y1, fy) = src(y, s.h, out_h);
        let (x0, x1, fx) = src(x_, s.w, out_w);
        let v00 = x.at(n, c, y0, x0);
        let v01 = x.at(n, c, y0, x1);
        let v10 = x.at(n, c, y1, x0);
        let v11 = x.at(n, c, y1, x1);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    })
}

/// Mean per-pixel softmax cross-entropy over non-ignored labels.
pub fn cross_entropy_pixel(logits: &Tensor<f64>, labels: &[u8], ignore: u8) -> f64 {
    let s = logits.shape();
    let mut total = 0.0;
    let mut count = 0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = labels[(n * s.h + y) * s.w + x];
                if label == ignore {
                    continue;
                }
                let z: f64 = (0..s.c).map(|c| logits.at(n, c, y, x).exp()).sum();
                total += -(logits.at(n, label as usize, y, x).exp() / z).ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
