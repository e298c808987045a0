//! RGB images and normalized boxes.

use crate::error::{shape_err, Error, Result};

/// Row-major RGB image with channels interleaved, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(shape_err("image", format!("{} values for {height}x{width}x3", pixels.len())));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format { what: "ppm", detail: detail.into() };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?.to_string());
        }
        if fields[0] != "P6" {
            return Err(bad("magic is not P6"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() != width * height * 3 {
            return Err(bad("pixel data length does not match header"));
        }
        Ok(Self { height, width, pixels: body.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Normalized `(cx, cy, w, h)` box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { cx: 0.5 * (x1 + x2), cy: 0.5 * (y1 + y2), w: x2 - x1, h: y2 - y1 }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (inter, union) = inter_union(self, other);
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU, in `[-1, 1]`.
    pub fn giou(&self, other: &BBox) -> f64 {
        let (inter, union) = inter_union(self, other);
        let [a1, b1, a2, b2] = self.corners();
        let [c1, d1, c2, d2] = other.corners();
        let hull = (a2.max(c2) - a1.min(c1)) * (b2.max(d2) - b1.min(d1));
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array().iter().zip(other.to_array()).map(|(a, b)| (a - b).abs()).sum()
    }
}

fn inter_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [a1, b1, a2, b2] = a.corners();
    let [c1, d1, c2, d2] = b.corners();
    let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
    let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
    let inter = iw * ih;
    // Corner-form areas keep identical boxes at exactly IoU 1.
    let area = |x1: f64, y1: f64, x2: f64, y2: f64| (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    (inter, area(a1, b1, a2, b2) + area(c1, d1, c2, d2) - inter)
}
