//! Binary netpbm: P5 for label maps, P6 for RGB images, maxval 255 only.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::tensor::{LabelMap, Shape, Tensor};

/// Decoded netpbm payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Pnm {
    /// P5, one byte per pixel.
    Gray { width: usize, height: usize, data: Vec<u8> },
    /// P6, interleaved RGB bytes.
    Rgb { width: usize, height: usize, data: Vec<u8> },
}

impl Pnm {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Pnm::Gray { width, height, .. } | Pnm::Rgb { width, height, .. } => (*height, *width),
        }
    }

    /// Labels from a P5 payload.
    pub fn into_labels(self) -> Result<LabelMap, DataError> {
        match self {
            Pnm::Gray { width, height, data } => {
                Ok(LabelMap::new(1, height, width, data).expect("payload length checked"))
            }
            Pnm::Rgb { .. } => Err(DataError::Format("expected a P5 label map, found P6".into())),
        }
    }

    /// `(1, 3, H, W)` image in `[0, 1]` from a P6 payload.
    pub fn into_image(self) -> Result<Tensor<f32>, DataError> {
        match self {
            Pnm::Rgb { width, height, data } => Ok(Tensor::from_fn(Shape::new(1, 3, height, width), |_, c, y, x| {
                data[(y * width + x) * 3 + c] as f32 / 255.0
            })),
            Pnm::Gray { .. } => Err(DataError::Format("expected a P6 image, found P5".into())),
        }
    }

    pub fn from_labels(labels: &LabelMap) -> Pnm {
        assert_eq!(labels.n, 1, "one label map per file");
        Pnm::Gray {
            width: labels.w,
            height: labels.h,
            data: labels.data.clone(),
        }
    }

    /// Quantises `[0, 1]` values with round-to-nearest; out-of-range values clamp.
    pub fn from_image(image: &Tensor<f32>) -> Pnm {
        let s = image.shape();
        assert!(s.n == 1 && s.c == 3, "expected (1,3,H,W), got {s}");
        let mut data = Vec::with_capacity(3 * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        Pnm::Rgb {
            width: s.w,
            height: s.h,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (magic, width, height, data) = match self {
            Pnm::Gray { width, height, data } => ("P5", width, height, data),
            Pnm::Rgb { width, height, data } => ("P6", width, height, data),
        };
        let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
        out.extend_from_slice(data);
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> DataError {
        DataError::Pnm {
            path: None,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|_| DataError::Pnm {
            path: None,
            offset: start,
            reason: format!("{what} out of range"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm, DataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let rgb = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P6") => true,
        _ => return Err(cur.err("expected magic P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(DataError::Pnm {
            path: None,
            offset: maxval_at,
            reason: format!("maxval must be 255, got {maxval}"),
        });
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected whitespace after maxval"));
    }
    cur.pos += 1;
    let len = width * height * if rgb { 3 } else { 1 };
    let payload = &bytes[cur.pos..];
    if payload.len() < len {
        return Err(DataError::Pnm {
            path: None,
            offset: bytes.len(),
            reason: format!("truncated payload: expected {len} bytes, found {}", payload.len()),
        });
    }
    if payload.len() > len {
        return Err(DataError::Pnm {
            path: None,
            offset: cur.pos + len,
            reason: format!("{} trailing bytes after payload", payload.len() - len),
        });
    }
    let data = payload.to_vec();
    Ok(if rgb {
        Pnm::Rgb { width, height, data }
    } else {
        Pnm::Gray { width, height, data }
    })
}

pub fn read_pnm(path: &Path) -> Result<Pnm, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes).map_err(|e| e.at_path(path))
}

pub fn write_pnm(path: &Path, pnm: &Pnm) -> Result<(), DataError> {
    fs::write(path, pnm.encode()).map_err(|e| DataError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    read_pnm(path)?.into_image().map_err(|e| e.at_path(path))
}

pub fn read_labels(path: &Path) -> Result<LabelMap, DataError> {
    read_pnm(path)?.into_labels().map_err(|e| e.at_path(path))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    write_pnm(path, &Pnm::from_image(image))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<(), DataError> {
    write_pnm(path, &Pnm::from_labels(labels))
}
