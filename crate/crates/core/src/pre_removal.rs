//! Mask screening before removal: geometry rules, the class-name similarity
//! gate for abnormal views, and dilation of the survivors.

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::backends::Embedder;
use crate::error::{Error, Result};
use crate::model::{ImageRecord, MaskAnnotation};
use crate::post_removal::{masked_region_embedding, RegionWeighting};
use crate::raster::{is_set, mask_area, Mask, Rgb, MASK_ON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    #[default]
    Square,
    Disc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DilationConfig {
    pub k: f64,
    pub r_min: u32,
    pub r_max: u32,
    pub element: StructuringElement,
}

impl Default for DilationConfig {
    fn default() -> Self {
        DilationConfig {
            k: 0.05,
            r_min: 3,
            r_max: 25,
            element: StructuringElement::Square,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub min_area_frac: f64,
    pub max_area_frac: f64,
    pub border_margin_frac: f64,
    /// Masks whose object/class similarity falls below this are dropped.
    pub abnormality_threshold: f64,
    pub dilation: DilationConfig,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            min_area_frac: 0.005,
            max_area_frac: 0.30,
            border_margin_frac: 0.05,
            abnormality_threshold: 0.21,
            dilation: DilationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryFailure {
    TooSmall,
    TooLarge,
    NearBorder,
}

impl std::fmt::Display for GeometryFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeometryFailure::TooSmall => "too_small",
            GeometryFailure::TooLarge => "too_large",
            GeometryFailure::NearBorder => "near_border",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryDecision {
    Pass,
    Fail(GeometryFailure),
}

pub fn filter_mask_geometry(mask: &MaskAnnotation, image: &ImageRecord, cfg: &GeometryConfig) -> Result<GeometryDecision> {
    crate::raster::same_dims(mask.mask.dimensions(), (image.width, image.height))?;
    Ok(geometry_decision(&mask.mask, cfg))
}

pub fn geometry_decision(mask: &Mask, cfg: &GeometryConfig) -> GeometryDecision {
    let (w, h) = mask.dimensions();
    let total = w as f64 * h as f64;
    let area = mask_area(mask);
    let frac = area as f64 / total;
    if area == 0 || frac < cfg.min_area_frac {
        return GeometryDecision::Fail(GeometryFailure::TooSmall);
    }
    if frac > cfg.max_area_frac {
        return GeometryDecision::Fail(GeometryFailure::TooLarge);
    }
    let margin = cfg.border_margin_frac * w.min(h) as f64;
    let bb = crate::raster::mask_bbox(mask).expect("non-empty mask has a bbox");
    let nearest = [
        bb.x,
        bb.y,
        w - 1 - (bb.x + bb.w - 1),
        h - 1 - (bb.y + bb.h - 1),
    ]
    .into_iter()
    .min()
    .unwrap_or(0);
    if (nearest as f64) < margin {
        return GeometryDecision::Fail(GeometryFailure::NearBorder);
    }
    GeometryDecision::Pass
}

pub fn class_prompt(object_label: &str) -> String {
    format!("a photo of a {object_label}")
}

/// Cosine between the soft-masked object and "a photo of a <label>".
pub fn abnormality_score(
    image: &Rgb,
    mask: &Mask,
    object_label: &str,
    embedder: &dyn Embedder,
    weighting: RegionWeighting,
) -> Result<f64> {
    let region = masked_region_embedding(image, mask, embedder, weighting)?;
    let text = embedder.embed_text(&class_prompt(object_label))?;
    region.cosine(&text)
}

pub fn dilation_radius(area_px: u64, cfg: &DilationConfig) -> u32 {
    let r = (cfg.k * (area_px as f64).sqrt()).round();
    let r = if r.is_finite() && r > 0.0 { r as u32 } else { 0 };
    r.clamp(cfg.r_min, cfg.r_max.max(cfg.r_min))
}

/// Minkowski dilation with a `(2r+1)²` square element; radius 0 is the identity.
pub fn dilate_mask(mask: &Mask, radius_px: u32) -> Mask {
    dilate_with(mask, radius_px, StructuringElement::Square)
}

pub fn dilate_with(mask: &Mask, radius_px: u32, element: StructuringElement) -> Mask {
    if radius_px == 0 {
        return mask.clone();
    }
    match element {
        StructuringElement::Square => dilate_square(mask, radius_px),
        StructuringElement::Disc => dilate_disc(mask, radius_px),
    }
}

// Separable running max: rows, then columns.
fn dilate_square(mask: &Mask, r: u32) -> Mask {
    let (w, h) = mask.dimensions();
    let r = r as i64;
    let src: Vec<bool> = mask.as_raw().iter().map(|&v| is_set(v)).collect();
    let idx = |x: i64, y: i64| (y * w as i64 + x) as usize;
    let mut rows = vec![false; src.len()];
    for y in 0..h as i64 {
        // distance to the nearest set pixel on the left / right, via prefix scans
        let mut last = i64::MIN / 2;
        let mut left = vec![i64::MAX; w as usize];
        for x in 0..w as i64 {
            if src[idx(x, y)] {
                last = x;
            }
            left[x as usize] = x - last;
        }
        let mut next = i64::MAX / 2;
        for x in (0..w as i64).rev() {
            if src[idx(x, y)] {
                next = x;
            }
            rows[idx(x, y)] = left[x as usize] <= r || next - x <= r;
        }
    }
    let mut out = GrayImage::new(w, h);
    for x in 0..w as i64 {
        let mut last = i64::MIN / 2;
        let mut up = vec![i64::MAX; h as usize];
        for y in 0..h as i64 {
            if rows[idx(x, y)] {
                last = y;
            }
            up[y as usize] = y - last;
        }
        let mut next = i64::MAX / 2;
        for y in (0..h as i64).rev() {
            if rows[idx(x, y)] {
                next = y;
            }
            if up[y as usize] <= r || next - y <= r {
                out.put_pixel(x as u32, y as u32, Luma([MASK_ON]));
            }
        }
    }
    out
}

fn dilate_disc(mask: &Mask, r: u32) -> Mask {
    let (w, h) = mask.dimensions();
    let r = r as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = GrayImage::new(w, h);
    for (x, y, p) in mask.enumerate_pixels() {
        if !is_set(p.0[0]) {
            continue;
        }
        for (dx, dy) in &offsets {
            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
            if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 {
                out.put_pixel(xx as u32, yy as u32, Luma([MASK_ON]));
            }
        }
    }
    out
}

/// Geometry-checked, non-empty mask or a precondition error.
pub fn require_non_empty(mask: &Mask) -> Result<()> {
    if mask_area(mask) == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(())
}
