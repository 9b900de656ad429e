//! Raster helpers shared by every stage.
//!
//! Images are 8-bit RGB, masks are single-channel with values `{0, 255}`.
//! Anything non-zero in a mask counts as set.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Rgb = RgbImage;
pub type Mask = GrayImage;

pub const MASK_ON: u8 = 255;

/// Tight bounding box of the set pixels, `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[inline]
pub fn is_set(v: u8) -> bool {
    v != 0
}

pub fn empty_mask(width: u32, height: u32) -> Mask {
    GrayImage::new(width, height)
}

pub fn full_mask(width: u32, height: u32) -> Mask {
    GrayImage::from_pixel(width, height, Luma([MASK_ON]))
}

pub fn mask_area(mask: &Mask) -> u64 {
    mask.as_raw().iter().filter(|&&v| is_set(v)).count() as u64
}

pub fn mask_bbox(mask: &Mask) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    let mut any = false;
    for (x, y, p) in mask.enumerate_pixels() {
        if is_set(p.0[0]) {
            any = true;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    any.then(|| BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Soft per-pixel weights in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl WeightMap {
    pub fn from_mask(mask: &Mask) -> Self {
        WeightMap {
            width: mask.width(),
            height: mask.height(),
            data: mask
                .as_raw()
                .iter()
                .map(|&v| if is_set(v) { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    /// Separable Gaussian blur with edge replication, truncated at `ceil(3σ)`.
    /// A non-positive sigma leaves the map untouched. Output is clamped to `[0, 1]`.
    pub fn blurred(&self, sigma: f64) -> Self {
        if !(sigma > 1e-9) {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as i64 - r).clamp(0, w - 1);
                    acc += kv * self.data[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as i64 - r).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc.clamp(0.0, 1.0);
            }
        }
        WeightMap {
            width: self.width,
            height: self.height,
            data: out,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

pub fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::dims(
            format!("{}x{}", a.0, a.1),
            format!("{}x{}", b.0, b.1),
        ));
    }
    Ok(())
}

/// Per-channel mean over all pixels.
pub fn mean_color(image: &Rgb) -> [f64; 3] {
    let n = (image.width() as f64) * (image.height() as f64);
    let mut acc = [0.0f64; 3];
    for p in image.pixels() {
        for c in 0..3 {
            acc[c] += p.0[c] as f64;
        }
    }
    acc.map(|v| if n > 0.0 { v / n } else { 0.0 })
}

/// Floating-point RGB raster, values on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbF {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl RgbF {
    pub fn quantize(&self) -> Rgb {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let p = self.data[(y * self.width + x) as usize];
            image::Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }
}

pub fn encode_png_rgb(image: &Rgb) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_png_mask(mask: &Mask) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    mask.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Rgb> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    Ok(binarize(&gray))
}

pub fn binarize(gray: &GrayImage) -> Mask {
    GrayImage::from_fn(gray.width(), gray.height(), |x, y| {
        Luma([if is_set(gray.get_pixel(x, y).0[0]) { MASK_ON } else { 0 }])
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
