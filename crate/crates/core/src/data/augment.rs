//! Random scale, rotation, crop/pad and horizontal flip, resampled in one
//! pass: bilinear for images, nearest for labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassTable, SegSample};
use crate::tensor::{LabelMap, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    /// Output `(height, width)`.
    pub crop_hw: (usize, usize),
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn new(crop_hw: (usize, usize)) -> Self {
        AugmentConfig {
            scale_range: (0.5, 1.5),
            max_rotation_deg: 30.0,
            crop_hw,
            flip_prob: 0.5,
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Top-left corner of the crop in the scaled, rotated canvas; negative
    /// values pad.
    pub offset: (i64, i64),
    pub flip: bool,
}

impl AugmentDraw {
    /// Unit scale, no rotation, no flip, zero offset.
    pub fn identity() -> Self {
        AugmentDraw {
            scale: 1.0,
            rotation_deg: 0.0,
            offset: (0, 0),
            flip: false,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig, src_hw: (usize, usize)) -> Self {
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let r = cfg.max_rotation_deg;
        let rotation_deg = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let canvas = scaled_dims(src_hw, scale);
        let mut offset_along = |canvas: usize, crop: usize| -> i64 {
            let d = canvas as i64 - crop as i64;
            let (a, b) = (d.min(0), d.max(0));
            if a == b {
                a
            } else {
                rng.gen_range(a..=b)
            }
        };
        let oy = offset_along(canvas.0, cfg.crop_hw.0);
        let ox = offset_along(canvas.1, cfg.crop_hw.1);
        let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
        AugmentDraw {
            scale,
            rotation_deg,
            offset: (oy, ox),
            flip,
        }
    }
}

fn scaled_dims(hw: (usize, usize), scale: f64) -> (usize, usize) {
    let f = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (f(hw.0), f(hw.1))
}

/// Samples a draw from `rng` and applies it.
pub fn augment<R: Rng>(sample: &SegSample, rng: &mut R, cfg: &AugmentConfig, classes: &ClassTable) -> SegSample {
    let s = sample.image.shape();
    let draw = AugmentDraw::sample(rng, cfg, (s.h, s.w));
    apply(sample, &draw, cfg.crop_hw, classes)
}

/// Resamples `sample` under `draw` into a `crop_hw` output.
pub fn apply(sample: &SegSample, draw: &AugmentDraw, crop_hw: (usize, usize), classes: &ClassTable) -> SegSample {
    let src = sample.image.shape();
    let (sh, sw) = (src.h, src.w);
    let (ch, cw) = scaled_dims((sh, sw), draw.scale);
    let (oh, ow) = crop_hw;
    // exact per-axis factors keep the identity draw exact
    let fy = sh as f64 / ch as f64;
    let fx = sw as f64 / cw as f64;
    let (sin, cos) = draw.rotation_deg.to_radians().sin_cos();
    let (ccy, ccx) = (ch as f64 / 2.0, cw as f64 / 2.0);

    let mut mean = [0f32; 3];
    for (c, m) in mean.iter_mut().enumerate() {
        let plane = &sample.image.data()[c * sh * sw..(c + 1) * sh * sw];
        *m = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
    }

    let mut image = Tensor::zeros(Shape::new(1, 3, oh, ow));
    let mut labels = LabelMap::filled(1, oh, ow, sample.ignore);
    for y in 0..oh {
        for x in 0..ow {
            let xo = if draw.flip { ow - 1 - x } else { x };
            // pixel centre in the rotated canvas
            let py = (y as i64 + draw.offset.0) as f64 + 0.5;
            let px = (xo as i64 + draw.offset.1) as f64 + 0.5;
            // undo the rotation about the canvas centre
            let (dy, dx) = (py - ccy, px - ccx);
            let (qy, qx) = if draw.rotation_deg == 0.0 {
                (py, px)
            } else {
                (ccy + cos * dy - sin * dx, ccx + sin * dy + cos * dx)
            };
            let inside = qy >= 0.0 && qx >= 0.0 && qy < ch as f64 && qx < cw as f64;
            let out = image.index(0, 0, y, x);
            let plane = oh * ow;
            if !inside {
                for c in 0..3 {
                    image.data_mut()[out + c * plane] = mean[c];
                }
                continue;
            }
            // source coordinates under the half-pixel convention
            let sy = qy * fy - 0.5;
            let sx = qx * fx - 0.5;
            let ny = ((qy * fy).floor() as usize).min(sh - 1);
            let nx = ((qx * fx).floor() as usize).min(sw - 1);
            let mut label = sample.labels.get(0, ny, nx);
            if draw.flip && label != sample.ignore {
                label = classes.flipped(label as usize) as u8;
            }
            labels.set(0, y, x, label);
            let (y0, y1, wy) = taps(sy, sh);
            let (x0, x1, wx) = taps(sx, sw);
            for c in 0..3 {
                let v = |yy, xx| sample.image.at(0, c, yy, xx) as f64;
                let top = v(y0, x0) * (1.0 - wx) + v(y0, x1) * wx;
                let bot = v(y1, x0) * (1.0 - wx) + v(y1, x1) * wx;
                let val = if wy == 0.0 { top } else { top * (1.0 - wy) + bot * wy };
                image.data_mut()[out + c * plane] = val as f32;
            }
        }
    }
    SegSample {
        image,
        labels,
        ignore: sample.ignore,
    }
}

fn taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, pos - lo as f64)
}

/// Mirrors a sample horizontally and swaps left/right labels.
pub fn flip_sample(sample: &SegSample, classes: &ClassTable) -> SegSample {
    SegSample {
        image: sample.image.flip_w(),
        labels: flip_labels(&sample.labels, sample.ignore, classes),
        ignore: sample.ignore,
    }
}

pub fn flip_labels(labels: &LabelMap, ignore: u8, classes: &ClassTable) -> LabelMap {
    let mut out = labels.flip_w();
    for v in out.data.iter_mut() {
        if *v != ignore {
            *v = classes.flipped(*v as usize) as u8;
        }
    }
    out
}
