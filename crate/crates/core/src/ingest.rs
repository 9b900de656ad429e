//! COCO-style annotation ingestion.
//!
//! Polygons are rasterized by sampling pixel centers with the even-odd rule;
//! multi-part objects are the union of their parts. Run-length masks are
//! accepted both uncompressed (`counts` as integers) and in the compact
//! string form, column-major as in the reference tooling.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;
use crate::error::{Error, Result};
use crate::model::{ImageRecord, MaskAnnotation};
use crate::raster::{is_set, Mask, MASK_ON};

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct CocoFile {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [u32; 2] },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum RleCounts {
    Uncompressed(Vec<u64>),
    Compressed(String),
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub source_tag: String,
    /// Drop a later annotation of the same label on the same image when its
    /// IoU with a kept one reaches this value.
    pub dedup_iou: Option<f64>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            source_tag: "coco".into(),
            dedup_iou: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ImageRecord>,
    pub masks: Vec<MaskAnnotation>,
    /// Annotations skipped for referencing a missing image or category.
    pub warnings: u64,
    pub deduplicated: u64,
}

pub fn ingest_coco_style(annotation_file: &Path, image_dir: &Path) -> Result<Ingested> {
    ingest_coco_with(annotation_file, image_dir, &IngestOptions::default())
}

pub fn ingest_coco_with(annotation_file: &Path, image_dir: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let text = std::fs::read_to_string(annotation_file)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", annotation_file.display())))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::Ingest(format!("{}: {e}", annotation_file.display())))?;
    ingest_parsed(&coco, image_dir, opts)
}

pub fn ingest_parsed(coco: &CocoFile, image_dir: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let images: HashMap<u64, &CocoImage> = coco.images.iter().map(|i| (i.id, i)).collect();
    let categories: HashMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut out = Ingested::default();
    let mut records: BTreeMap<u64, ImageRecord> = BTreeMap::new();
    let mut exists_cache: HashMap<u64, bool> = HashMap::new();

    for ann in &coco.annotations {
        let Some(img) = images.get(&ann.image_id) else {
            out.warnings += 1;
            continue;
        };
        let present = *exists_cache
            .entry(img.id)
            .or_insert_with(|| image_dir.join(&img.file_name).is_file());
        if !present {
            out.warnings += 1;
            continue;
        }
        let Some(&label) = categories.get(&ann.category_id) else {
            out.warnings += 1;
            continue;
        };
        if img.width == 0 || img.height == 0 {
            return Err(Error::Ingest(format!("image {} has zero size", img.id)));
        }
        let mask = decode_segmentation(&ann.segmentation, img.width, img.height)?;
        let record_id = format!("{}:{}", opts.source_tag, img.id);
        records.entry(img.id).or_insert_with(|| ImageRecord {
            record_id: record_id.clone(),
            image_ref: BlobRef(img.file_name.clone()),
            width: img.width,
            height: img.height,
            source_tag: opts.source_tag.clone(),
        });
        out.masks.push(MaskAnnotation::new(record_id, ann.id, label, mask));
    }
    out.records = records.into_values().collect();

    if let Some(iou) = opts.dedup_iou {
        let before = out.masks.len();
        out.masks = dedup_overlapping(std::mem::take(&mut out.masks), iou);
        out.deduplicated = (before - out.masks.len()) as u64;
    }
    Ok(out)
}

pub fn decode_segmentation(seg: &Segmentation, width: u32, height: u32) -> Result<Mask> {
    match seg {
        Segmentation::Polygons(polys) => {
            let mut mask = GrayImage::new(width, height);
            for flat in polys {
                if flat.len() < 6 || flat.len() % 2 != 0 {
                    return Err(Error::Ingest(format!(
                        "polygon needs an even number (>= 6) of coordinates, got {}",
                        flat.len()
                    )));
                }
                let pts: Vec<(f64, f64)> = flat.chunks(2).map(|c| (c[0], c[1])).collect();
                rasterize_polygon_into(&pts, &mut mask);
            }
            Ok(mask)
        }
        Segmentation::Rle { counts, size } => {
            let [h, w] = *size;
            if (w, h) != (width, height) {
                return Err(Error::Ingest(format!(
                    "rle size {w}x{h} does not match image {width}x{height}"
                )));
            }
            let counts = match counts {
                RleCounts::Uncompressed(c) => c.clone(),
                RleCounts::Compressed(s) => decode_rle_string(s)?,
            };
            rle_to_mask(&counts, width, height)
        }
    }
}

/// Scanline fill of one polygon (even-odd rule, pixel-center sampling).
pub fn rasterize_polygon_into(pts: &[(f64, f64)], mask: &mut Mask) {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let n = pts.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for y in 0..h {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x1, y1) = pts[i];
            let (x2, y2) = pts[(i + 1) % n];
            if (y1 <= yc) != (y2 <= yc) {
                xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for span in xs.chunks_exact(2) {
            // pixels whose center lies in [span[0], span[1])
            let start = ((span[0] - 0.5).ceil() as i64).max(0);
            let end = ((span[1] - 0.5).ceil() as i64).min(w);
            for x in start..end {
                mask.put_pixel(x as u32, y as u32, Luma([MASK_ON]));
            }
        }
    }
}

/// Decodes the compact ASCII run-length form into counts.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0u32;
        loop {
            let Some(&b) = bytes.get(p) else {
                return Err(Error::Ingest("truncated rle string".into()));
            };
            let c = b as i64 - 48;
            if !(0..64).contains(&c) || k > 12 {
                return Err(Error::Ingest(format!("invalid rle byte at {p}")));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::Ingest("negative rle run".into())))
        .collect()
}

/// Encodes counts in the compact ASCII run-length form.
pub fn encode_rle_string(counts: &[u64]) -> String {
    let mut out = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let mut x = c as i64;
        if i > 2 {
            x -= counts[i - 2] as i64;
        }
        loop {
            let mut ch = x & 0x1f;
            x >>= 5;
            let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                ch |= 0x20;
            }
            out.push((ch as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

/// Column-major runs, alternating unset/set and starting with unset.
pub fn rle_to_mask(counts: &[u64], width: u32, height: u32) -> Result<Mask> {
    let total = width as u64 * height as u64;
    let sum: u64 = counts.iter().sum();
    if sum != total {
        return Err(Error::Ingest(format!("rle covers {sum} pixels, image has {total}")));
    }
    let mut mask = GrayImage::new(width, height);
    let mut idx = 0u64;
    for (i, &run) in counts.iter().enumerate() {
        if i % 2 == 1 {
            for j in idx..idx + run {
                let (x, y) = ((j / height as u64) as u32, (j % height as u64) as u32);
                mask.put_pixel(x, y, Luma([MASK_ON]));
            }
        }
        idx += run;
    }
    Ok(mask)
}

pub fn mask_to_rle(mask: &Mask) -> Vec<u64> {
    let (w, h) = mask.dimensions();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = is_set(mask.get_pixel(x, y).0[0]);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (pa, pb) in a.as_raw().iter().zip(b.as_raw()) {
        let (sa, sb) = (is_set(*pa), is_set(*pb));
        inter += (sa && sb) as u64;
        union += (sa || sb) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Keeps the first of any same-image, same-label annotations overlapping at `iou` or more.
pub fn dedup_overlapping(masks: Vec<MaskAnnotation>, iou: f64) -> Vec<MaskAnnotation> {
    let mut kept: Vec<MaskAnnotation> = Vec::with_capacity(masks.len());
    for m in masks {
        let dup = kept.iter().any(|k| {
            k.record_id == m.record_id && k.object_label == m.object_label && mask_iou(&k.mask, &m.mask) >= iou
        });
        if !dup {
            kept.push(m);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_square_polygon() {
        let mut m = GrayImage::new(10, 10);
        rasterize_polygon_into(&[(2.0, 2.0), (6.0, 2.0), (6.0, 5.0), (2.0, 5.0)], &mut m);
        assert_eq!(crate::raster::mask_area(&m), 12);
    }

    #[test]
    fn rle_string_roundtrip() {
        let counts = vec![3, 5, 0, 17, 200, 1, 1, 40];
        assert_eq!(decode_rle_string(&encode_rle_string(&counts)).unwrap(), counts);
    }

    #[test]
    fn rle_decodes_column_major() {
        // 2x3 image (w=3, h=2): runs [1 off, 2 on, 3 off] -> pixels (0,1) and (1,0)
        let m = rle_to_mask(&[1, 2, 3], 3, 2).unwrap();
        assert!(!is_set(m.get_pixel(0, 0).0[0]));
        assert!(is_set(m.get_pixel(0, 1).0[0]));
        assert!(is_set(m.get_pixel(1, 0).0[0]));
        assert_eq!(crate::raster::mask_area(&m), 2);
        assert_eq!(mask_to_rle(&m), vec![1, 2, 3]);
    }

    #[test]
    fn rle_size_mismatch_is_an_error() {
        assert!(rle_to_mask(&[1, 2], 3, 2).is_err());
    }

    #[test]
    fn dedup_drops_same_label_overlap() {
        let mut a = GrayImage::new(8, 8);
        rasterize_polygon_into(&[(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)], &mut a);
        let m1 = MaskAnnotation::new("r", 1, "cat", a.clone());
        let m2 = MaskAnnotation::new("r", 2, "cat", a.clone());
        let m3 = MaskAnnotation::new("r", 3, "dog", a);
        let kept = dedup_overlapping(vec![m1, m2, m3], 0.9);
        assert_eq!(kept.iter().map(|m| m.annotation_id).collect::<Vec<_>>(), vec![1, 3]);
    }
}
