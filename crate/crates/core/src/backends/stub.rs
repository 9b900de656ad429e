//! Deterministic offline backends.
//!
//! Embeddings are pseudo-random unit vectors keyed by a content hash, so
//! identical rasters or strings always embed identically and nothing else
//! about the input matters. Use them to exercise plumbing, not semantics.

use std::sync::Arc;

use image::Rgb as Px;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use super::{
    BackendSet, Captioner, ChatTranscript, Denoiser, Embedder, InpaintRequest, Inpainter,
    InstructionWriter, Role,
};
use crate::error::{Error, Result};
use crate::guidance::LatentState;
use crate::model::EmbeddingVector;
use crate::raster::{is_set, same_dims, Rgb};
use crate::seed::rng_from_parts;

pub const DEFAULT_STUB_DIMENSION: usize = 64;

pub fn make_stub_backends(seed: u64) -> BackendSet {
    make_stub_backends_with_dim(seed, DEFAULT_STUB_DIMENSION)
}

pub fn make_stub_backends_with_dim(seed: u64, dimension: usize) -> BackendSet {
    BackendSet {
        embedder: Arc::new(StubEmbedder::new("stub-clip", seed, dimension)),
        dino: Arc::new(StubEmbedder::new("stub-dino", seed, dimension)),
        inpainter: Arc::new(StubInpainter { seed }),
        captioner: Arc::new(StubCaptioner { seed }),
        writer: Arc::new(StubWriter),
        denoiser: Arc::new(StubDenoiser::new(seed)),
    }
}

#[derive(Debug, Clone)]
pub struct StubEmbedder {
    name: String,
    seed: u64,
    dimension: usize,
}

impl StubEmbedder {
    pub fn new(name: impl Into<String>, seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        StubEmbedder {
            name: name.into(),
            seed,
            dimension,
        }
    }

    fn vector(&self, kind: &[u8], content: &[&[u8]]) -> Result<EmbeddingVector> {
        let seed = self.seed.to_le_bytes();
        let mut parts: Vec<&[u8]> = vec![self.name.as_bytes(), &seed, kind];
        parts.extend_from_slice(content);
        let mut rng = rng_from_parts(&parts);
        let values: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingVector::unit(values)
    }
}

impl Embedder for StubEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image(&self, image: &Rgb) -> Result<EmbeddingVector> {
        let dims = [image.width().to_le_bytes(), image.height().to_le_bytes()].concat();
        self.vector(b"image", &[&dims, image.as_raw()])
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.vector(b"text", &[text.as_bytes()])
    }
}

/// Copies the input and fills the masked region with seeded noise around the
/// mean color of the unmasked pixels.
#[derive(Debug, Clone)]
pub struct StubInpainter {
    seed: u64,
}

impl Inpainter for StubInpainter {
    fn name(&self) -> &str {
        "stub-inpaint"
    }

    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Rgb> {
        same_dims(req.image.dimensions(), req.mask.dimensions())?;
        let mut out = req.image.clone();
        let (mut acc, mut n) = ([0.0f64; 3], 0.0f64);
        for (p, m) in req.image.pixels().zip(req.mask.pixels()) {
            if !is_set(m.0[0]) {
                for c in 0..3 {
                    acc[c] += p.0[c] as f64;
                }
                n += 1.0;
            }
        }
        let base = if n > 0.0 { acc.map(|v| v / n) } else { [128.0; 3] };
        let stub_seed = self.seed.to_le_bytes();
        let req_seed = req.seed.to_le_bytes();
        let steps = req.steps.to_le_bytes();
        let mut rng = rng_from_parts(&[
            b"inpaint",
            &stub_seed,
            &req_seed,
            &steps,
            req.positive_prompt.as_bytes(),
            req.negative_prompt.as_bytes(),
        ]);
        for (x, y, m) in req.mask.enumerate_pixels() {
            if is_set(m.0[0]) {
                let px = base.map(|b| (b + rng.random_range(-24.0..24.0)).round().clamp(0.0, 255.0) as u8);
                out.put_pixel(x, y, Px(px));
            }
        }
        Ok(out)
    }
}

const COLOR_NAMES: [(&str, [f64; 3]); 8] = [
    ("black", [0.0, 0.0, 0.0]),
    ("white", [255.0, 255.0, 255.0]),
    ("red", [200.0, 40.0, 40.0]),
    ("green", [40.0, 170.0, 60.0]),
    ("blue", [40.0, 70.0, 200.0]),
    ("yellow", [230.0, 210.0, 50.0]),
    ("brown", [130.0, 85.0, 45.0]),
    ("gray", [128.0, 128.0, 128.0]),
];

const TEXTURES: [&str; 5] = ["smooth", "striped", "glossy", "matte", "speckled"];

fn nearest_color_name(rgb: [f64; 3]) -> &'static str {
    COLOR_NAMES
        .iter()
        .min_by(|a, b| {
            let da: f64 = a.1.iter().zip(rgb).map(|(x, y)| (x - y).powi(2)).sum();
            let db: f64 = b.1.iter().zip(rgb).map(|(x, y)| (x - y).powi(2)).sum();
            da.total_cmp(&db)
        })
        .map(|c| c.0)
        .unwrap_or("gray")
}

/// Names the dominant color and a hash-chosen texture of the subject named in the prompt.
#[derive(Debug, Clone)]
pub struct StubCaptioner {
    seed: u64,
}

impl Captioner for StubCaptioner {
    fn name(&self) -> &str {
        "stub-captioner"
    }

    fn describe(&self, image: &Rgb, prompt: &str) -> Result<String> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Precondition("cannot describe an empty image".into()));
        }
        let mean = crate::raster::mean_color(image);
        let seed = self.seed.to_le_bytes();
        let mut rng = rng_from_parts(&[b"caption", &seed, image.as_raw(), prompt.as_bytes()]);
        let texture = TEXTURES[rng.random_range(0..TEXTURES.len())];
        let subject = subject_from_prompt(prompt).unwrap_or("object");
        Ok(format!(
            "a {} {} {} with a compact shape",
            texture,
            nearest_color_name(mean),
            subject
        ))
    }
}

fn subject_from_prompt(prompt: &str) -> Option<&str> {
    let rest = prompt.split("characteristics of the ").nth(1)?;
    rest.split('.').next().map(str::trim).filter(|s| !s.is_empty())
}

/// Rewrites the final caption into a short "add ..." instruction.
#[derive(Debug, Clone)]
pub struct StubWriter;

impl InstructionWriter for StubWriter {
    fn name(&self) -> &str {
        "stub-writer"
    }

    fn complete(&self, transcript: &ChatTranscript) -> Result<String> {
        let last = transcript
            .turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .ok_or_else(|| Error::Precondition("transcript has no user turn".into()))?;
        let caption = last
            .content
            .split("instruction: ")
            .nth(1)
            .and_then(|s| s.split(". Use straightforward").next())
            .map(str::trim)
            .unwrap_or("");
        let caption = caption.strip_prefix("a ").or_else(|| caption.strip_prefix("an ")).unwrap_or(caption);
        let caption = caption.split(" with ").next().unwrap_or(caption);
        if caption.is_empty() {
            Ok("add the described object".into())
        } else {
            Ok(format!("add a {caption}"))
        }
    }
}

/// `score = a·z + b·u(text) + c·u(image)`, where `u` is a hash-derived unit
/// pattern of the condition (a separate fixed pattern when it is absent).
#[derive(Debug, Clone)]
pub struct StubDenoiser {
    seed: u64,
    pub latent_gain: f64,
    pub text_gain: f64,
    pub image_gain: f64,
}

impl StubDenoiser {
    pub fn new(seed: u64) -> Self {
        StubDenoiser {
            seed,
            latent_gain: 0.3,
            text_gain: 0.2,
            image_gain: 0.1,
        }
    }

    /// Condition contribution, exposed so tests can build closed-form oracles.
    pub fn pattern(&self, tag: &str, cond: Option<&[f64]>, len: usize) -> Vec<f64> {
        let seed = self.seed.to_le_bytes();
        let bytes: Vec<u8> = match cond {
            Some(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            None => b"<absent>".to_vec(),
        };
        let present = [cond.is_some() as u8];
        let mut rng = rng_from_parts(&[b"denoise", &seed, tag.as_bytes(), &present, &bytes]);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl Denoiser for StubDenoiser {
    fn name(&self) -> &str {
        "stub-denoiser"
    }

    fn score(&self, latent: &LatentState, text: Option<&[f64]>, image: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = latent.values.len();
        let ut = self.pattern("text", text, n);
        let ui = self.pattern("image", image, n);
        Ok(latent
            .values
            .iter()
            .zip(ut.iter().zip(&ui))
            .map(|(z, (t, i))| self.latent_gain * z + self.text_gain * t + self.image_gain * i)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{empty_mask, full_mask};

    fn image() -> Rgb {
        Rgb::from_fn(8, 6, |x, y| Px([(x * 30) as u8, (y * 40) as u8, 90]))
    }

    #[test]
    fn text_embedding_is_deterministic_and_unit() {
        let b = make_stub_backends(7);
        let a = b.embedder.embed_text("cat").unwrap();
        assert_eq!(a, b.embedder.embed_text("cat").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a.dim(), DEFAULT_STUB_DIMENSION);
        assert_ne!(a, b.embedder.embed_text("dog").unwrap());
    }

    #[test]
    fn image_embedding_unit_norm() {
        let b = make_stub_backends(7);
        let e = b.embedder.embed_image(&image()).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_ne!(e, b.dino.embed_image(&image()).unwrap());
    }

    #[test]
    fn zero_mask_inpaint_is_identity() {
        let b = make_stub_backends(1);
        let img = image();
        let mask = empty_mask(8, 6);
        let out = b
            .inpainter
            .inpaint(&InpaintRequest {
                image: &img,
                mask: &mask,
                positive_prompt: "p",
                negative_prompt: "n",
                steps: 10,
                seed: 3,
            })
            .unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn inpaint_depends_on_seed_only_in_mask() {
        let b = make_stub_backends(1);
        let img = image();
        let mask = full_mask(8, 6);
        let run = |seed| {
            b.inpainter
                .inpaint(&InpaintRequest {
                    image: &img,
                    mask: &mask,
                    positive_prompt: "p",
                    negative_prompt: "n",
                    steps: 10,
                    seed,
                })
                .unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn denoiser_shape_and_absent_differs_from_zero() {
        let d = StubDenoiser::new(0);
        let z = LatentState::new(vec![0.0; 4], vec![4], 3);
        let absent = d.score(&z, None, None).unwrap();
        let zero = d.score(&z, Some(&[0.0; 4]), None).unwrap();
        assert_eq!(absent.len(), 4);
        assert_ne!(absent, zero);
    }
}
