//! Synthetic COCO-style corpus for smoke runs and tests.
//!
//! Each image is a smooth two-color gradient with one to three flat-colored
//! objects. Object sizes and positions are drawn so that some masks are too
//! small, too large or touch the border, which gives the geometry gate
//! something to reject. About a third of the annotations use run-length
//! segmentations, the rest polygons.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::RngExt;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{
    decode_segmentation, encode_rle_string, mask_to_rle, CocoAnnotation, CocoCategory, CocoFile, CocoImage, RleCounts,
    Segmentation,
};
use crate::raster::{encode_png_rgb, is_set};
use crate::seed::rng_from_parts;

pub const SYNTH_LABELS: [&str; 8] = ["dog", "cat", "bus", "cup", "umbrella", "apple", "chair", "bird"];

const COLOR_WORDS: [(&str, [u8; 3]); 4] = [
    ("red", [200, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 200]),
    ("yellow", [220, 200, 40]),
];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            images: 200,
            width: 96,
            height: 96,
            max_objects: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub annotations: PathBuf,
    pub images: PathBuf,
    /// RefCOCO-style referring expressions for some annotations.
    pub references: PathBuf,
    pub annotation_count: usize,
}

#[derive(Serialize)]
struct RefOut {
    ann_id: u64,
    sentences: Vec<RefSentenceOut>,
}

#[derive(Serialize)]
struct RefSentenceOut {
    sent: String,
}

/// Thresholds inside the stub backends' score ranges, so every gate rejects
/// part of a synthetic corpus. The defaults target CLIP-like embedders and
/// would pass or fail everything under the stubs.
pub fn apply_stub_thresholds(cfg: &mut PipelineConfig) {
    cfg.pre_removal.abnormality_threshold = -0.1;
    cfg.post_removal.consensus_threshold = 0.092;
    cfg.post_removal.mm_threshold = 0.0;
    cfg.post_removal.importance_threshold = 0.1;
}

pub fn write_synthetic_corpus(dir: &Path, opts: &SynthOptions) -> Result<SynthCorpus> {
    if opts.width < 16 || opts.height < 16 {
        return Err(Error::Precondition("synthetic images need at least 16x16 pixels".into()));
    }
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let (w, h) = (opts.width, opts.height);
    let mut coco = CocoFile {
        categories: SYNTH_LABELS
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        ..Default::default()
    };
    let mut refs = Vec::new();
    let mut next_ann = 1u64;

    for i in 0..opts.images {
        let mut rng = rng_from_parts(&[b"synth", &opts.seed.to_le_bytes(), &(i as u64).to_le_bytes()]);
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..200.0));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..200.0));
        let mut img = RgbImage::from_fn(w, h, |x, y| {
            let t = (x + y) as f64 / (w + h - 2) as f64;
            image::Rgb(std::array::from_fn(|k| (c0[k] * (1.0 - t) + c1[k] * t).round() as u8))
        });
        let file_name = format!("synth_{i:05}.png");
        let image_id = i as u64 + 1;

        let n_obj = rng.random_range(1..=opts.max_objects.max(1));
        for _ in 0..n_obj {
            let cat = rng.random_range(0..SYNTH_LABELS.len());
            let (color_word, color) = COLOR_WORDS[rng.random_range(0..COLOR_WORDS.len())];
            // mostly mid-sized objects away from the border, with some outliers
            let size_frac = match rng.random_range(0..10) {
                0 => rng.random_range(0.03..0.06),
                1 => rng.random_range(0.65..0.85),
                _ => rng.random_range(0.18..0.40),
            };
            let bw = (size_frac * w as f64).max(2.0);
            let bh = (size_frac * h as f64 * rng.random_range(0.7..1.3)).clamp(2.0, h as f64 - 2.0);
            let hug_border = rng.random_range(0..10) == 0;
            let x0 = if hug_border { 0.0 } else { rng.random_range(0.08 * w as f64..(0.92 * w as f64 - bw).max(0.08 * w as f64 + 1.0)) };
            let y0 = rng.random_range(0.08 * h as f64..(0.92 * h as f64 - bh).max(0.08 * h as f64 + 1.0));
            let (x1, y1) = ((x0 + bw).min(w as f64), (y0 + bh).min(h as f64));
            let poly: Vec<f64> = if rng.random_bool(0.5) {
                vec![x0, y0, x1, y0, x1, y1, x0, y1]
            } else {
                // ellipse
                let (cx, cy, rx, ry) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (x1 - x0) / 2.0, (y1 - y0) / 2.0);
                (0..16)
                    .flat_map(|k| {
                        let a = k as f64 * std::f64::consts::TAU / 16.0;
                        [cx + rx * a.cos(), cy + ry * a.sin()]
                    })
                    .collect()
            };
            let polygons = Segmentation::Polygons(vec![poly]);
            let mask = decode_segmentation(&polygons, w, h)?;
            for (x, y, p) in img.enumerate_pixels_mut() {
                if is_set(mask.get_pixel(x, y).0[0]) {
                    // slight texture so candidates differ from a flat fill
                    let v = ((x * 7 + y * 13) % 9) as i32 - 4;
                    *p = image::Rgb(color.map(|c| (c as i32 + v).clamp(0, 255) as u8));
                }
            }
            let segmentation = if rng.random_range(0..3) == 0 {
                Segmentation::Rle {
                    counts: RleCounts::Compressed(encode_rle_string(&mask_to_rle(&mask))),
                    size: [h, w],
                }
            } else {
                polygons
            };
            let ann_id = next_ann;
            next_ann += 1;
            if rng.random_range(0..8) == 0 {
                let side = if x0 + bw / 2.0 < w as f64 / 2.0 { "left" } else { "right" };
                refs.push(RefOut {
                    ann_id,
                    sentences: vec![RefSentenceOut {
                        sent: format!("{color_word} {} on the {side}", SYNTH_LABELS[cat]),
                    }],
                });
            }
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: cat as u64 + 1,
                segmentation,
                iscrowd: 0,
            });
        }
        let path = image_dir.join(&file_name);
        std::fs::write(&path, encode_png_rgb(&img)?).map_err(|e| Error::io(&path, e))?;
        coco.images.push(CocoImage {
            id: image_id,
            file_name,
            width: w,
            height: h,
        });
    }

    let annotations = dir.join("annotations.json");
    std::fs::write(&annotations, serde_json::to_vec(&coco)?).map_err(|e| Error::io(&annotations, e))?;
    let references = dir.join("references.json");
    std::fs::write(&references, serde_json::to_vec(&refs)?).map_err(|e| Error::io(&references, e))?;
    Ok(SynthCorpus {
        annotations,
        images: image_dir,
        references,
        annotation_count: coco.annotations.len(),
    })
}
