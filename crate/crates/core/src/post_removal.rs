//! Verification and refinement of removal candidates.
//!
//! Order is fixed: consensus over the candidates' region embeddings, the
//! per-candidate multimodal check (with the similarity-shift rescue),
//! selection of the lowest-scoring passing candidate, feathered
//! α-blending into the original, then the whole-image importance check.
//! The first failing gate short-circuits everything after it.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendSet, Embedder};
use crate::blob::BlobStore;
use crate::error::{Error, Result};
use crate::model::{EditPairRecord, EmbeddingVector, Gate, StageFlag};
use crate::pre_removal::{class_prompt, dilate_with, StructuringElement};
use crate::raster::{mean_color, same_dims, Mask, Rgb, RgbF, WeightMap};
use crate::removal::GeneratedCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatherSigmaRule {
    Fixed(f64),
    Named(NamedSigmaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedSigmaRule {
    #[serde(rename = "radius/2")]
    HalfRadius,
}

impl FeatherSigmaRule {
    pub fn sigma(self, dilation_radius: u32) -> f64 {
        match self {
            FeatherSigmaRule::Fixed(s) => s,
            FeatherSigmaRule::Named(NamedSigmaRule::HalfRadius) => dilation_radius as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostRemovalConfig {
    pub consensus_threshold: f64,
    pub mm_threshold: f64,
    pub shift_delta: f64,
    pub importance_threshold: f64,
    pub feather_sigma_rule: FeatherSigmaRule,
}

impl Default for PostRemovalConfig {
    fn default() -> Self {
        PostRemovalConfig {
            consensus_threshold: 0.045,
            mm_threshold: 0.25,
            shift_delta: 0.15,
            importance_threshold: 0.95,
            feather_sigma_rule: FeatherSigmaRule::Named(NamedSigmaRule::HalfRadius),
        }
    }
}

/// How a binary mask becomes soft compositing weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionWeighting {
    pub dilation_radius: u32,
    pub feather_sigma: f64,
    pub element: StructuringElement,
}

impl RegionWeighting {
    pub fn new(dilation_radius: u32, feather_sigma: f64) -> Self {
        RegionWeighting {
            dilation_radius,
            feather_sigma,
            element: StructuringElement::Square,
        }
    }

    /// Hard mask, no dilation or feathering.
    pub fn exact() -> Self {
        Self::new(0, 0.0)
    }
}

pub fn region_weights(mask: &Mask, weighting: RegionWeighting) -> WeightMap {
    let dilated = dilate_with(mask, weighting.dilation_radius, weighting.element);
    WeightMap::from_mask(&dilated).blurred(weighting.feather_sigma)
}

/// `w·image + (1−w)·mean_color(image)` per pixel.
pub fn composite_on_mean(image: &Rgb, weights: &WeightMap) -> Result<RgbF> {
    same_dims(image.dimensions(), (weights.width, weights.height))?;
    let mean = mean_color(image);
    let data = image
        .pixels()
        .zip(&weights.data)
        .map(|(p, &w)| {
            if w >= 1.0 {
                p.0.map(f64::from)
            } else {
                [0, 1, 2].map(|c| w * p.0[c] as f64 + (1.0 - w) * mean[c])
            }
        })
        .collect();
    Ok(RgbF {
        width: image.width(),
        height: image.height(),
        data,
    })
}

/// Embedding of the masked region composited over the image's mean color.
pub fn masked_region_embedding(
    image: &Rgb,
    mask: &Mask,
    embedder: &dyn Embedder,
    weighting: RegionWeighting,
) -> Result<EmbeddingVector> {
    same_dims(image.dimensions(), mask.dimensions())?;
    crate::pre_removal::require_non_empty(mask)?;
    region_embedding_with_weights(image, &region_weights(mask, weighting), embedder)
}

pub fn region_embedding_with_weights(image: &Rgb, weights: &WeightMap, embedder: &dyn Embedder) -> Result<EmbeddingVector> {
    if weights.data.iter().all(|&w| w == 0.0) {
        return Err(Error::EmptyRegion);
    }
    let composite = composite_on_mean(image, weights)?.quantize();
    normalized(embedder.embed_image(&composite)?)
}

fn normalized(v: EmbeddingVector) -> Result<EmbeddingVector> {
    if v.normalized {
        Ok(v)
    } else {
        EmbeddingVector::unit(v.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub value: f64,
    pub pass: bool,
}

/// Mean over dimensions of the per-dimension population standard deviation
/// across the candidates' unit-normalized embeddings.
pub fn clip_consensus(embeddings: &[EmbeddingVector], threshold: f64) -> Result<ConsensusResult> {
    let value = consensus_value(embeddings)?;
    Ok(ConsensusResult {
        value,
        pass: value <= threshold,
    })
}

pub fn consensus_value(embeddings: &[EmbeddingVector]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::Precondition("consensus needs at least two candidates".into()));
    }
    let dim = embeddings[0].dim();
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::dims(dim, bad.dim()));
    }
    let units = embeddings
        .iter()
        .cloned()
        .map(normalized)
        .collect::<Result<Vec<_>>>()?;
    let n = units.len() as f64;
    let mut column = vec![0.0; units.len()];
    let mut total = 0.0;
    for d in 0..dim {
        for (slot, e) in column.iter_mut().zip(&units) {
            *slot = e.values[d];
        }
        // sorted and shifted by the minimum: exact under permutation, exactly
        // zero for identical columns
        column.sort_by(f64::total_cmp);
        let base = column[0];
        let mean_dev = column.iter().map(|v| v - base).sum::<f64>() / n;
        let var = column.iter().map(|v| (v - base - mean_dev).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    Ok(total / dim as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MMClipResult {
    pub pre_score: f64,
    pub post_score: f64,
    pub shift: f64,
    pub pass: bool,
}

/// Pass when the post-removal score is low enough, or when it dropped by at
/// least `shift_delta` from the original.
pub fn mm_decide(pre_score: f64, post_score: f64, cfg: &PostRemovalConfig) -> MMClipResult {
    let shift = pre_score - post_score;
    MMClipResult {
        pre_score,
        post_score,
        shift,
        pass: post_score <= cfg.mm_threshold || shift >= cfg.shift_delta,
    }
}

pub fn multimodal_filter(
    original: &Rgb,
    candidate: &Rgb,
    mask: &Mask,
    object_label: &str,
    embedder: &dyn Embedder,
    weighting: RegionWeighting,
    cfg: &PostRemovalConfig,
) -> Result<MMClipResult> {
    same_dims(original.dimensions(), candidate.dimensions())?;
    let text = embedder.embed_text(&class_prompt(object_label))?;
    let pre = masked_region_embedding(original, mask, embedder, weighting)?.cosine(&text)?;
    let post = masked_region_embedding(candidate, mask, embedder, weighting)?.cosine(&text)?;
    Ok(mm_decide(pre, post, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Consensus,
    MmClip,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rejection::Consensus => "no_consensus",
            Rejection::MmClip => "mm_clip",
        })
    }
}

/// Lowest passing post-score wins; ties go to the lower index.
pub fn select_candidate(consensus: &ConsensusResult, results: &[MMClipResult]) -> std::result::Result<u32, Rejection> {
    if !consensus.pass {
        return Err(Rejection::Consensus);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        if r.pass && best.is_none_or(|(_, s)| r.post_score < s) {
            best = Some((i, r.post_score));
        }
    }
    best.map(|(i, _)| i as u32).ok_or(Rejection::MmClip)
}

/// The candidate blended into the record's source, even when the importance
/// check later cleared the selection.
pub fn blended_candidate(record: &EditPairRecord) -> Option<u32> {
    if record.selected_candidate.is_some() {
        return record.selected_candidate;
    }
    record.scores.importance?;
    let results: Vec<MMClipResult> = record
        .candidates
        .iter()
        .map(|c| MMClipResult {
            pre_score: record.scores.mm_clip_pre.unwrap_or(0.0),
            post_score: c.mm_clip_score.unwrap_or(f64::INFINITY),
            shift: 0.0,
            pass: c.mm_clip_pass == Some(true),
        })
        .collect();
    let consensus = ConsensusResult { value: 0.0, pass: true };
    select_candidate(&consensus, &results).ok()
}

/// `round(w·inpainted + (1−w)·source)` with `w` the blurred mask. Pixels with
/// `w = 0` are copied from the source untouched.
pub fn alpha_blend(source_original: &Rgb, inpainted: &Rgb, mask: &Mask, feather_sigma: f64) -> Result<Rgb> {
    same_dims(source_original.dimensions(), mask.dimensions())?;
    let weights = WeightMap::from_mask(mask).blurred(feather_sigma);
    blend_with_weights(source_original, inpainted, &weights)
}

pub fn blend_with_weights(source: &Rgb, inpainted: &Rgb, weights: &WeightMap) -> Result<Rgb> {
    same_dims(source.dimensions(), inpainted.dimensions())?;
    same_dims(source.dimensions(), (weights.width, weights.height))?;
    let mut out = source.clone();
    for ((o, ip), &w) in out.pixels_mut().zip(inpainted.pixels()).zip(&weights.data) {
        let w = w.clamp(0.0, 1.0);
        if w == 0.0 {
            continue;
        }
        if w == 1.0 {
            *o = *ip;
            continue;
        }
        for c in 0..3 {
            let v = w * ip.0[c] as f64 + (1.0 - w) * o.0[c] as f64;
            o.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResult {
    pub similarity: f64,
    pub pass: bool,
}

/// Fails when source and target are so similar that the object hardly mattered.
pub fn importance_filter(source_blended: &Rgb, target_original: &Rgb, embedder: &dyn Embedder, threshold: f64) -> Result<ImportanceResult> {
    let a = embedder.embed_image(source_blended)?;
    let b = embedder.embed_image(target_original)?;
    let similarity = a.cosine(&b)?;
    Ok(importance_decide(similarity, threshold))
}

pub fn importance_decide(similarity: f64, threshold: f64) -> ImportanceResult {
    ImportanceResult {
        similarity,
        pass: similarity <= threshold,
    }
}

/// Inputs for one record's post-removal pass.
pub struct PostRemovalInput<'a> {
    pub original: &'a Rgb,
    pub mask: &'a Mask,
    pub dilated_mask: &'a Mask,
    pub dilation_radius: u32,
    pub candidates: Vec<GeneratedCandidate>,
}

fn backend_fail(e: &Error) -> StageFlag {
    StageFlag::fail(format!("backend: {e}"))
}

/// Applies consensus, multimodal filter, selection, blending and importance
/// filtering in order, updating the record's flags and scores.
pub fn run_post_removal(
    mut record: EditPairRecord,
    input: PostRemovalInput<'_>,
    backends: &BackendSet,
    store: &dyn BlobStore,
    cfg: &PostRemovalConfig,
) -> Result<EditPairRecord> {
    let embedder = backends.embedder.as_ref();
    let sigma = cfg.feather_sigma_rule.sigma(input.dilation_radius);
    let weights = WeightMap::from_mask(input.dilated_mask).blurred(sigma);

    // consensus
    let mut embeddings = Vec::with_capacity(input.candidates.len());
    for g in &input.candidates {
        match region_embedding_with_weights(&g.image, &weights, embedder) {
            Ok(e) => embeddings.push(e),
            Err(e) => {
                record.set_flag(Gate::Consensus, backend_fail(&e));
                return Ok(record);
            }
        }
    }
    record.candidates = input
        .candidates
        .iter()
        .zip(&embeddings)
        .map(|(g, e)| {
            let mut c = g.candidate.clone();
            c.region_embedding = Some(e.clone());
            c
        })
        .collect();
    let consensus = match clip_consensus(&embeddings, cfg.consensus_threshold) {
        Ok(c) => c,
        Err(e) => {
            record.set_flag(Gate::Consensus, StageFlag::fail(e));
            return Ok(record);
        }
    };
    record.scores.consensus = Some(consensus.value);
    if !consensus.pass {
        record.set_flag(Gate::Consensus, StageFlag::fail(Rejection::Consensus));
        return Ok(record);
    }
    record.set_flag(Gate::Consensus, StageFlag::Pass);

    // multimodal filter
    let mm = (|| -> Result<Vec<MMClipResult>> {
        let text = embedder.embed_text(&class_prompt(&record.object_label))?;
        let pre = region_embedding_with_weights(input.original, &weights, embedder)?.cosine(&text)?;
        embeddings
            .iter()
            .map(|e| Ok(mm_decide(pre, e.cosine(&text)?, cfg)))
            .collect()
    })();
    let mm = match mm {
        Ok(r) => r,
        Err(e) => {
            record.set_flag(Gate::MmClip, backend_fail(&e));
            return Ok(record);
        }
    };
    for (c, r) in record.candidates.iter_mut().zip(&mm) {
        c.mm_clip_score = Some(r.post_score);
        c.mm_clip_pass = Some(r.pass);
    }
    record.scores.mm_clip_pre = mm.first().map(|r| r.pre_score);
    let selected = match select_candidate(&consensus, &mm) {
        Ok(i) => i,
        Err(rej) => {
            record.scores.mm_clip_post = mm.iter().map(|r| r.post_score).min_by(f64::total_cmp);
            record.set_flag(Gate::MmClip, StageFlag::fail(rej));
            return Ok(record);
        }
    };
    record.scores.mm_clip_post = Some(mm[selected as usize].post_score);
    record.set_flag(Gate::MmClip, StageFlag::Pass);
    record.selected_candidate = Some(selected);

    // consistency enforcement + importance
    let chosen = &input.candidates[selected as usize].image;
    let blended = blend_with_weights(input.original, chosen, &weights)?;
    record.source_image_ref = Some(store.put_rgb(&blended)?);
    match importance_filter(&blended, input.original, embedder, cfg.importance_threshold) {
        Ok(imp) => {
            record.scores.importance = Some(imp.similarity);
            if imp.pass {
                record.set_flag(Gate::Importance, StageFlag::Pass);
            } else {
                record.set_flag(Gate::Importance, StageFlag::fail("marginal_object"));
                record.selected_candidate = None;
            }
        }
        Err(e) => {
            record.set_flag(Gate::Importance, backend_fail(&e));
            record.selected_candidate = None;
        }
    }
    let _ = input.mask;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::StubEmbedder;
    use crate::raster::{empty_mask, full_mask};
    use image::{Luma, Rgb as Px};

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::unit(v.to_vec()).unwrap()
    }

    #[test]
    fn consensus_zero_for_identical() {
        let e = unit(&[0.1, 0.7, -0.3, 0.2]);
        let r = clip_consensus(&[e.clone(), e.clone(), e], 0.045).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn consensus_hand_fixture() {
        let r = consensus_value(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 0.0])]).unwrap();
        assert!((r - 2f64.sqrt() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn consensus_errors() {
        assert!(consensus_value(&[unit(&[1.0, 0.0])]).is_err());
        assert!(consensus_value(&[unit(&[1.0, 0.0]), unit(&[1.0, 0.0, 0.0])]).is_err());
    }

    #[test]
    fn mm_rule_examples() {
        let cfg = PostRemovalConfig::default();
        assert!(mm_decide(0.0, 0.18, &cfg).pass);
        let rescued = mm_decide(0.45, 0.28, &cfg);
        assert!(rescued.pass);
        assert!((rescued.shift - 0.17).abs() < 1e-12);
        assert!(!mm_decide(0.30, 0.28, &cfg).pass);
    }

    fn passing(scores: &[f64]) -> Vec<MMClipResult> {
        scores
            .iter()
            .map(|&s| MMClipResult {
                pre_score: 0.0,
                post_score: s,
                shift: -s,
                pass: true,
            })
            .collect()
    }

    #[test]
    fn selection_rules() {
        let ok = ConsensusResult { value: 0.0, pass: true };
        assert_eq!(select_candidate(&ok, &passing(&[0.20, 0.10, 0.15])), Ok(1));
        assert_eq!(select_candidate(&ok, &passing(&[0.10, 0.10, 0.30])), Ok(0));
        let mut none = passing(&[0.3, 0.4]);
        none.iter_mut().for_each(|r| r.pass = false);
        assert_eq!(select_candidate(&ok, &none), Err(Rejection::MmClip));
        let bad = ConsensusResult { value: 1.0, pass: false };
        assert_eq!(select_candidate(&bad, &passing(&[0.1])), Err(Rejection::Consensus));
    }

    fn img(seed: u8) -> Rgb {
        Rgb::from_fn(6, 5, |x, y| Px([(x as u8 * 40).wrapping_add(seed), (y * 50) as u8, seed]))
    }

    #[test]
    fn blend_identities() {
        let (s, i) = (img(3), img(200));
        assert_eq!(alpha_blend(&s, &i, &empty_mask(6, 5), 2.0).unwrap(), s);
        assert_eq!(alpha_blend(&s, &i, &full_mask(6, 5), 0.0).unwrap(), i);
    }

    #[test]
    fn blend_half_weight() {
        let s = Rgb::from_pixel(1, 1, Px([100, 100, 100]));
        let i = Rgb::from_pixel(1, 1, Px([200, 200, 200]));
        let w = WeightMap {
            width: 1,
            height: 1,
            data: vec![0.5],
        };
        assert_eq!(blend_with_weights(&s, &i, &w).unwrap().get_pixel(0, 0).0, [150, 150, 150]);
    }

    #[test]
    fn composite_hand_fixture() {
        let image = Rgb::from_fn(2, 1, |x, _| if x == 0 { Px([0, 0, 0]) } else { Px([255, 255, 255]) });
        let mut mask = empty_mask(2, 1);
        mask.put_pixel(0, 0, Luma([255]));
        let c = composite_on_mean(&image, &region_weights(&mask, RegionWeighting::exact())).unwrap();
        assert_eq!(c.data, vec![[0.0; 3], [127.5; 3]]);
    }

    #[test]
    fn full_mask_region_embedding_is_plain_embedding() {
        let e = StubEmbedder::new("e", 1, 16);
        let image = img(9);
        let r = masked_region_embedding(&image, &full_mask(6, 5), &e, RegionWeighting::new(2, 1.5)).unwrap();
        assert_eq!(r, e.embed_image(&image).unwrap());
    }

    #[test]
    fn constant_image_composite_is_identity() {
        let image = Rgb::from_pixel(5, 4, Px([12, 80, 200]));
        let mut mask = empty_mask(5, 4);
        mask.put_pixel(2, 2, Luma([255]));
        let c = composite_on_mean(&image, &region_weights(&mask, RegionWeighting::new(1, 1.0))).unwrap();
        assert_eq!(c.quantize(), image);
    }

    #[test]
    fn empty_mask_region_is_error() {
        let e = StubEmbedder::new("e", 1, 16);
        assert!(matches!(
            masked_region_embedding(&img(1), &empty_mask(6, 5), &e, RegionWeighting::exact()),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn importance_on_identical_images_fails() {
        let e = StubEmbedder::new("e", 1, 16);
        let r = importance_filter(&img(4), &img(4), &e, 0.95).unwrap();
        assert!((r.similarity - 1.0).abs() < 1e-12);
        assert!(!r.pass);
    }
}
