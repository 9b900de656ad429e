//! Object removal: prompt construction and candidate generation.

use serde::{Deserialize, Serialize};

use crate::backends::{InpaintRequest, Inpainter};
use crate::blob::BlobStore;
use crate::error::{Error, Result};
use crate::model::RemovalCandidate;
use crate::raster::{same_dims, Mask, Rgb};

pub const POSITIVE_REMOVAL_PROMPT: &str = "a photo of a background, a photo of an empty place";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemovalConfig {
    pub n_candidates: u32,
    pub steps: u32,
    pub seed_base: u64,
    /// Passed through to the inpainting service untouched.
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    pub guidance: serde_json::Map<String, serde_json::Value>,
}

impl Default for RemovalConfig {
    fn default() -> Self {
        RemovalConfig {
            n_candidates: 3,
            steps: 10,
            seed_base: 0,
            guidance: serde_json::Map::new(),
        }
    }
}

pub fn build_removal_prompts(object_label: &str) -> Result<(String, String)> {
    if object_label.trim().is_empty() {
        return Err(Error::Precondition("object label must be non-empty".into()));
    }
    Ok((POSITIVE_REMOVAL_PROMPT.to_string(), format!("an object, a {object_label}")))
}

/// A generated candidate together with its pixels.
#[derive(Debug, Clone)]
pub struct GeneratedCandidate {
    pub candidate: RemovalCandidate,
    pub image: Rgb,
}

/// Failure while generating candidate `index`.
#[derive(Debug)]
pub struct InpaintFailure {
    pub index: u32,
    pub error: Error,
}

impl std::fmt::Display for InpaintFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "inpaint_error(candidate {}): {}", self.index, self.error)
    }
}

/// Runs the inpainter `n` times with seeds `seed_base + i`.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    pair_id: &str,
    image: &Rgb,
    dilated_mask: &Mask,
    object_label: &str,
    inpainter: &dyn Inpainter,
    n: u32,
    steps: u32,
    seed_base: u64,
) -> std::result::Result<Vec<GeneratedCandidate>, InpaintFailure> {
    let pre = |error| InpaintFailure { index: 0, error };
    same_dims(image.dimensions(), dilated_mask.dimensions()).map_err(pre)?;
    if n == 0 {
        return Err(pre(Error::Precondition("n_candidates must be at least 1".into())));
    }
    let (positive, negative) = build_removal_prompts(object_label).map_err(pre)?;
    (0..n)
        .map(|i| {
            let seed = seed_base.wrapping_add(i as u64);
            let out = inpainter
                .inpaint(&InpaintRequest {
                    image,
                    mask: dilated_mask,
                    positive_prompt: &positive,
                    negative_prompt: &negative,
                    steps,
                    seed,
                })
                .and_then(|img| {
                    same_dims(image.dimensions(), img.dimensions())?;
                    Ok(img)
                })
                .map_err(|error| InpaintFailure { index: i, error })?;
            Ok(GeneratedCandidate {
                candidate: RemovalCandidate {
                    pair_id: pair_id.to_string(),
                    candidate_index: i,
                    image_ref: crate::blob::BlobRef(String::new()),
                    seed,
                    region_embedding: None,
                    mm_clip_score: None,
                    mm_clip_pass: None,
                },
                image: out,
            })
        })
        .collect()
}

/// Stores candidate images and fills in their refs.
pub fn store_candidates(store: &dyn BlobStore, generated: &mut [GeneratedCandidate]) -> Result<()> {
    for g in generated {
        g.candidate.image_ref = store.put_rgb(&g.image)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::make_stub_backends;
    use crate::raster::{empty_mask, full_mask};

    #[test]
    fn prompts_match_templates() {
        assert_eq!(
            build_removal_prompts("dog").unwrap(),
            (
                "a photo of a background, a photo of an empty place".to_string(),
                "an object, a dog".to_string()
            )
        );
        assert_eq!(build_removal_prompts("fire hydrant").unwrap().1, "an object, a fire hydrant");
        assert!(build_removal_prompts("").is_err());
    }

    fn img() -> Rgb {
        Rgb::from_fn(9, 7, |x, y| image::Rgb([(x * 20) as u8, (y * 30) as u8, 77]))
    }

    #[test]
    fn three_candidates_distinct_seeds() {
        let b = make_stub_backends(0);
        let c = generate_candidates("p", &img(), &full_mask(9, 7), "dog", b.inpainter.as_ref(), 3, 10, 100).unwrap();
        assert_eq!(c.len(), 3);
        let seeds: Vec<u64> = c.iter().map(|g| g.candidate.seed).collect();
        assert_eq!(seeds, vec![100, 101, 102]);
        assert!(c.iter().all(|g| g.image.dimensions() == (9, 7)));
    }

    #[test]
    fn zero_mask_candidates_equal_source() {
        let b = make_stub_backends(0);
        let c = generate_candidates("p", &img(), &empty_mask(9, 7), "dog", b.inpainter.as_ref(), 3, 10, 0).unwrap();
        assert!(c.iter().all(|g| g.image == img()));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let b = make_stub_backends(4);
        let run = || {
            generate_candidates("p", &img(), &full_mask(9, 7), "cat", b.inpainter.as_ref(), 3, 10, 42)
                .unwrap()
                .into_iter()
                .map(|g| crate::raster::encode_png_rgb(&g.image).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    struct FailsAt(u64);
    impl Inpainter for FailsAt {
        fn name(&self) -> &str {
            "fails"
        }
        fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Rgb> {
            if req.seed == self.0 {
                Err(Error::BackendUnavailable {
                    service: "inpainter".into(),
                    message: "boom".into(),
                })
            } else {
                Ok(req.image.clone())
            }
        }
    }

    #[test]
    fn failing_candidate_reports_index() {
        let e = generate_candidates("p", &img(), &full_mask(9, 7), "cat", &FailsAt(11), 3, 10, 10).unwrap_err();
        assert_eq!(e.index, 1);
    }
}
