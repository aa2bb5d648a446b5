//! Procedural "humanoid parts" images: a stick figure of labelled regions
//! under a random similarity transform, with noisy per-class colours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::classes::part_to_class;
use super::{DataError, SegSample, IGNORE};
use crate::tensor::{LabelMap, Shape, Tensor};

/// Smallest accepted canvas side.
pub const MIN_SIDE: usize = 32;

/// Figure height (in figure units) relative to the shorter image side at
/// scale 1.
const REFERENCE: f64 = 0.85;
const SCALE_RANGE: (f64, f64) = (0.5, 1.5);
const MAX_ROTATION_DEG: f64 = 30.0;

#[derive(Clone, Debug)]
enum Region {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
    /// Convex polygon, vertices in order.
    Poly(Vec<(f64, f64)>),
}

impl Region {
    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Region::Poly(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    fn mirrored(&self) -> Self {
        match self {
            Region::Ellipse { cx, cy, rx, ry } => Region::Ellipse {
                cx: -cx,
                cy: *cy,
                rx: *rx,
                ry: *ry,
            },
            Region::Poly(v) => Region::Poly(v.iter().rev().map(|&(x, y)| (-x, y)).collect()),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Region::Poly(v) => {
                let mut sign = 0.0f64;
                for i in 0..v.len() {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % v.len()];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
        }
    }
}

/// `(part, region)` in painting order; later entries cover earlier ones.
/// Figure units: y points down, the figure spans roughly [-0.53, 0.5]; the
/// person's right side is drawn at negative x.
fn figure() -> Vec<(usize, Region)> {
    let mut parts = Vec::new();
    let pair = |parts: &mut Vec<(usize, Region)>, right: usize, left: usize, r: Region| {
        parts.push((left, r.mirrored()));
        parts.push((right, r));
    };
    pair(
        &mut parts,
        17,
        16,
        Region::Poly(vec![(-0.17, 0.10), (-0.02, 0.10), (-0.035, 0.42), (-0.155, 0.42)]),
    );
    parts.push((9, Region::rect(-0.18, 0.14, 0.18, 0.27)));
    parts.push((
        12,
        Region::Poly(vec![(-0.18, 0.07), (0.18, 0.07), (0.22, 0.16), (-0.22, 0.16)]),
    ));
    pair(&mut parts, 8, 8, Region::rect(-0.155, 0.355, -0.035, 0.42));
    pair(
        &mut parts,
        19,
        18,
        Region::Ellipse {
            cx: -0.1,
            cy: 0.45,
            rx: 0.09,
            ry: 0.05,
        },
    );
    parts.push((
        6,
        Region::Poly(vec![(-0.16, -0.01), (0.16, -0.01), (0.18, 0.07), (-0.18, 0.07)]),
    ));
    pair(&mut parts, 7, 7, Region::rect(-0.2, -0.25, -0.12, 0.04));
    parts.push((5, Region::rect(-0.12, -0.25, 0.12, -0.06)));
    parts.push((10, Region::rect(-0.12, -0.06, 0.12, -0.01)));
    pair(
        &mut parts,
        15,
        14,
        Region::Poly(vec![(-0.2, -0.25), (-0.2, -0.1), (-0.27, 0.08), (-0.4, 0.03)]),
    );
    pair(
        &mut parts,
        3,
        3,
        Region::Ellipse {
            cx: -0.345,
            cy: 0.08,
            rx: 0.06,
            ry: 0.06,
        },
    );
    parts.push((11, Region::rect(-0.08, -0.29, 0.08, -0.23)));
    parts.push((
        2,
        Region::Ellipse {
            cx: 0.0,
            cy: -0.4,
            rx: 0.125,
            ry: 0.105,
        },
    ));
    parts.push((
        13,
        Region::Ellipse {
            cx: 0.0,
            cy: -0.34,
            rx: 0.09,
            ry: 0.09,
        },
    ));
    parts.push((4, Region::rect(-0.08, -0.375, 0.08, -0.335)));
    parts.push((1, Region::rect(-0.14, -0.53, 0.14, -0.46)));
    parts
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Mean colour of class `c` (1-based) among `k` classes.
fn class_color(c: usize, k: usize) -> [f64; 3] {
    let hue = (c - 1) as f64 / (k - 1) as f64;
    let value = if c.is_multiple_of(2) { 0.85 } else { 0.6 };
    hsv(hue, 0.65, value)
}

/// Deterministic sample for `(seed, k, hw)`.
pub fn synth_sample(seed: u64, k: usize, hw: (usize, usize)) -> Result<SegSample, DataError> {
    if !(2..=20).contains(&k) {
        return Err(DataError::Classes(k));
    }
    let (h, w) = hw;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(DataError::TooSmall { h, w, min: MIN_SIDE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let cx = w as f64 * (0.5 + rng.gen_range(-0.12..=0.12));
    let cy = h as f64 * (0.5 + rng.gen_range(-0.12..=0.12));
    let unit = REFERENCE * h.min(w) as f64 * scale;
    let (sin, cos) = angle.sin_cos();

    let map = part_to_class(k);
    let jitter = Normal::new(0.0, 0.09).expect("finite");
    let pixel_noise = Normal::new(0.0, 0.05).expect("finite");
    let colors: Vec<[f64; 3]> = (0..k)
        .map(|c| {
            if c == 0 {
                [
                    rng.gen_range(0.15..0.85),
                    rng.gen_range(0.15..0.85),
                    rng.gen_range(0.15..0.85),
                ]
            } else {
                let base = class_color(c, k);
                [0, 1, 2].map(|i| base[i] + jitter.sample(&mut rng))
            }
        })
        .collect();
    let gradient = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];

    let parts = figure();
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / unit;
            let dy = (y as f64 + 0.5 - cy) / unit;
            // inverse rotation into figure coordinates
            let fx = cos * dx + sin * dy;
            let fy = -sin * dx + cos * dy;
            if let Some((part, _)) = parts.iter().rev().find(|(_, r)| r.contains(fx, fy)) {
                labels[y * w + x] = map[*part];
            }
        }
    }
    let mut image = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x] as usize;
            let shade = if c == 0 {
                gradient[0] * (x as f64 / w as f64 - 0.5) + gradient[1] * (y as f64 / h as f64 - 0.5)
            } else {
                0.0
            };
            for ch in 0..3 {
                let v = colors[c][ch] + shade + pixel_noise.sample(&mut rng);
                image[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(SegSample {
        image: Tensor::new(Shape::new(1, 3, h, w), image).expect("sized"),
        labels: LabelMap::new(1, h, w, labels).expect("sized"),
        ignore: IGNORE,
    })
}
