//! Domain types shared by every stage.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::BlobRef;
use crate::error::{Error, Result};
use crate::raster::{self, BBox, Mask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub record_id: String,
    pub image_ref: BlobRef,
    pub width: u32,
    pub height: u32,
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskAnnotation {
    pub record_id: String,
    pub annotation_id: u64,
    pub object_label: String,
    pub mask: Mask,
    pub area_px: u64,
    pub bbox: Option<BBox>,
}

impl MaskAnnotation {
    pub fn new(record_id: impl Into<String>, annotation_id: u64, label: impl Into<String>, mask: Mask) -> Self {
        MaskAnnotation {
            record_id: record_id.into(),
            annotation_id,
            object_label: label.into(),
            area_px: raster::mask_area(&mask),
            bbox: raster::mask_bbox(&mask),
            mask,
        }
    }
}

/// Stable identifier for one (record, object annotation) unit.
pub fn pair_id(record_id: &str, annotation_id: u64) -> String {
    let mut h = Sha256::new();
    h.update(record_id.as_bytes());
    h.update([0u8]);
    h.update(annotation_id.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Per-record filter gates, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Geometry,
    Abnormality,
    Inpaint,
    Consensus,
    MmClip,
    Importance,
}

impl Gate {
    pub const ORDER: [Gate; 6] = [
        Gate::Geometry,
        Gate::Abnormality,
        Gate::Inpaint,
        Gate::Consensus,
        Gate::MmClip,
        Gate::Importance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Geometry => "geometry",
            Gate::Abnormality => "abnormality",
            Gate::Inpaint => "inpaint",
            Gate::Consensus => "consensus",
            Gate::MmClip => "mm_clip",
            Gate::Importance => "importance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum StageFlag {
    Pass,
    Fail(String),
    Pending,
}

impl StageFlag {
    pub fn fail(reason: impl fmt::Display) -> Self {
        StageFlag::Fail(reason.to_string())
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, StageFlag::Pass)
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, StageFlag::Fail(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abnormality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_clip_pre: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_clip_post: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn raw(values: Vec<f64>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    /// Scales to unit Euclidean norm. A zero vector cannot be normalized.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Precondition("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        cosine(&self.values, &other.values)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Precondition("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalCandidate {
    pub pair_id: String,
    pub candidate_index: u32,
    pub image_ref: BlobRef,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_embedding: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_clip_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_clip_pass: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    ClassTemplate,
    VlmLlm,
    Reference,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 3] = [
        InstructionKind::ClassTemplate,
        InstructionKind::VlmLlm,
        InstructionKind::Reference,
    ];
}

/// One of the nine coarse image regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LocationCell {
    #[serde(rename = "top-left")]
    TopLeft,
    #[serde(rename = "top")]
    Top,
    #[serde(rename = "top-right")]
    TopRight,
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "center")]
    Center,
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "bottom-left")]
    BottomLeft,
    #[serde(rename = "bottom")]
    Bottom,
    #[serde(rename = "bottom-right")]
    BottomRight,
}

impl LocationCell {
    /// Row-major, top-left first.
    pub const GRID: [LocationCell; 9] = [
        LocationCell::TopLeft,
        LocationCell::Top,
        LocationCell::TopRight,
        LocationCell::Left,
        LocationCell::Center,
        LocationCell::Right,
        LocationCell::BottomLeft,
        LocationCell::Bottom,
        LocationCell::BottomRight,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LocationCell::TopLeft => "top-left",
            LocationCell::Top => "top",
            LocationCell::TopRight => "top-right",
            LocationCell::Left => "left",
            LocationCell::Center => "center",
            LocationCell::Right => "right",
            LocationCell::BottomLeft => "bottom-left",
            LocationCell::Bottom => "bottom",
            LocationCell::BottomRight => "bottom-right",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::GRID.into_iter().find(|c| c.label() == s)
    }
}

impl fmt::Display for LocationCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub kind: InstructionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_phrase: Option<LocationCell>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

impl Instruction {
    pub fn new(text: impl Into<String>, kind: InstructionKind) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Precondition("instruction text must be non-empty".into()));
        }
        Ok(Instruction {
            text,
            kind,
            location_phrase: None,
            provenance: BTreeMap::new(),
        })
    }
}

/// One (source, target, mask, label) unit flowing through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPairRecord {
    pub pair_id: String,
    pub record_id: String,
    pub annotation_id: u64,
    pub object_label: String,
    pub width: u32,
    pub height: u32,
    /// The original image, which becomes the editing target.
    pub target_image_ref: BlobRef,
    pub mask_ref: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilated_mask_ref: Option<BlobRef>,
    #[serde(default)]
    pub stage_flags: BTreeMap<Gate, StageFlag>,
    #[serde(default)]
    pub scores: Scores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_base: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<RemovalCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_candidate: Option<u32>,
    /// Inpainted, blended image; the editing source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_ref: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instructions: Vec<Instruction>,
}

impl EditPairRecord {
    pub fn new(image: &ImageRecord, annotation_id: u64, label: &str, mask_ref: BlobRef) -> Self {
        EditPairRecord {
            pair_id: pair_id(&image.record_id, annotation_id),
            record_id: image.record_id.clone(),
            annotation_id,
            object_label: label.to_string(),
            width: image.width,
            height: image.height,
            target_image_ref: image.image_ref.clone(),
            mask_ref,
            dilated_mask_ref: None,
            stage_flags: Gate::ORDER.iter().map(|&g| (g, StageFlag::Pending)).collect(),
            scores: Scores::default(),
            seed_base: None,
            candidates: Vec::new(),
            selected_candidate: None,
            source_image_ref: None,
            instructions: Vec::new(),
        }
    }

    pub fn flag(&self, gate: Gate) -> &StageFlag {
        self.stage_flags.get(&gate).unwrap_or(&StageFlag::Pending)
    }

    pub fn set_flag(&mut self, gate: Gate, flag: StageFlag) {
        self.stage_flags.insert(gate, flag);
    }

    pub fn has_failed(&self) -> bool {
        self.stage_flags.values().any(StageFlag::is_fail)
    }

    /// True when every gate up to and including `gate` passed.
    pub fn passed_through(&self, gate: Gate) -> bool {
        Gate::ORDER
            .iter()
            .take_while(|&&g| g <= gate)
            .all(|&g| self.flag(g).is_pass())
    }

    pub fn first_failure(&self) -> Option<(Gate, &str)> {
        Gate::ORDER.iter().find_map(|&g| match self.flag(g) {
            StageFlag::Fail(r) => Some((g, r.as_str())),
            _ => None,
        })
    }

    /// Flags form a prefix of passes, then at most one fail, then pendings;
    /// a selected candidate implies no failure and a passing prefix.
    pub fn validate(&self) -> Result<()> {
        let mut seen_non_pass = false;
        for g in Gate::ORDER {
            let f = self.flag(g);
            if seen_non_pass && !matches!(f, StageFlag::Pending) {
                return Err(Error::Manifest(format!(
                    "pair {}: gate {} set after a failed or pending gate",
                    self.pair_id,
                    g.name()
                )));
            }
            if !f.is_pass() {
                seen_non_pass = true;
            }
        }
        if self.selected_candidate.is_some() {
            if self.has_failed() {
                return Err(Error::Manifest(format!(
                    "pair {}: failed record carries a selected candidate",
                    self.pair_id
                )));
            }
            if !self.passed_through(Gate::MmClip) {
                return Err(Error::Manifest(format!(
                    "pair {}: candidate selected before its prior gates passed",
                    self.pair_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCount {
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub name: String,
    pub count: u64,
    /// Survivors after each sub-gate of this stage, in order; the last equals `count`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gates: Vec<GateCount>,
}

/// Ordered per-stage survival counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub stages: Vec<FunnelStage>,
}

impl FunnelStats {
    pub fn push(&mut self, name: impl Into<String>, count: u64) {
        self.stages.push(FunnelStage {
            name: name.into(),
            count,
            gates: Vec::new(),
        });
    }

    pub fn push_with_gates(&mut self, name: impl Into<String>, gates: Vec<GateCount>) {
        let count = gates.last().map(|g| g.count).unwrap_or(0);
        self.stages.push(FunnelStage {
            name: name.into(),
            count,
            gates,
        });
    }

    pub fn last_count(&self) -> Option<u64> {
        self.stages.last().map(|s| s.count)
    }

    pub fn stage(&self, name: &str) -> Option<&FunnelStage> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<(String, u64)> = None;
        for st in &self.stages {
            for g in &st.gates {
                check_step(&mut prev, &format!("{}.{}", st.name, g.name), g.count)?;
            }
            if let Some(last) = st.gates.last() {
                if last.count != st.count {
                    return Err(Error::Manifest(format!(
                        "stage '{}' count {} differs from its last gate {}",
                        st.name, st.count, last.count
                    )));
                }
            }
            check_step(&mut prev, &st.name, st.count)?;
        }
        Ok(())
    }
}

fn check_step(prev: &mut Option<(String, u64)>, name: &str, count: u64) -> Result<()> {
    if let Some((_, p)) = prev {
        if count > *p {
            return Err(Error::FunnelNotMonotone {
                stage: name.to_string(),
                count,
                previous: *p,
            });
        }
    }
    *prev = Some((name.to_string(), count));
    Ok(())
}

/// One shipped edit pair with its instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub source_image_ref: BlobRef,
    pub target_image_ref: BlobRef,
    pub mask_ref: BlobRef,
    pub object_label: String,
    pub instructions: Vec<Instruction>,
    pub scores: Scores,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_digest: String,
    pub funnel: FunnelStats,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.funnel.validate()?;
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if e.instructions.is_empty() {
                return Err(Error::Manifest(format!("entry {} has no instruction", e.pair_id)));
            }
            if !ids.insert(e.pair_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate pair_id {}", e.pair_id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_id_is_stable_and_distinct() {
        assert_eq!(pair_id("img1", 7), pair_id("img1", 7));
        assert_ne!(pair_id("img1", 7), pair_id("img1", 8));
        assert_ne!(pair_id("img1", 7), pair_id("img17", 7));
        assert_eq!(pair_id("img1", 7).len(), 16);
    }

    #[test]
    fn funnel_rejects_growth() {
        let mut f = FunnelStats::default();
        f.push("ingest", 100);
        f.push("prefilter", 40);
        assert!(f.validate().is_ok());
        f.stages[1].count = 140;
        assert!(matches!(f.validate(), Err(Error::FunnelNotMonotone { .. })));
    }

    #[test]
    fn funnel_gates_are_checked() {
        let mut f = FunnelStats::default();
        f.push("remove", 10);
        f.push_with_gates(
            "postfilter",
            vec![
                GateCount { name: "consensus".into(), count: 8 },
                GateCount { name: "mm_clip".into(), count: 9 },
            ],
        );
        assert!(f.validate().is_err());
    }

    #[test]
    fn record_flag_prefix_rule() {
        let img = ImageRecord {
            record_id: "r".into(),
            image_ref: BlobRef("a.png".into()),
            width: 4,
            height: 4,
            source_tag: "coco".into(),
        };
        let mut rec = EditPairRecord::new(&img, 1, "cat", BlobRef("m.png".into()));
        rec.validate().unwrap();
        rec.set_flag(Gate::Geometry, StageFlag::fail("too_small"));
        rec.validate().unwrap();
        rec.selected_candidate = Some(0);
        assert!(rec.validate().is_err());
        rec.selected_candidate = None;
        rec.set_flag(Gate::Abnormality, StageFlag::Pass);
        assert!(rec.validate().is_err());
    }

    #[test]
    fn unit_vectors() {
        let v = EmbeddingVector::unit(vec![3.0, 4.0]).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert!(EmbeddingVector::unit(vec![0.0, 0.0]).is_err());
        let e1 = EmbeddingVector::unit(vec![1.0, 0.0, 0.0]).unwrap();
        let e2 = EmbeddingVector::unit(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(e1.cosine(&e2).unwrap(), 0.0);
    }

    #[test]
    fn location_labels_roundtrip() {
        for c in LocationCell::GRID {
            assert_eq!(LocationCell::from_label(c.label()), Some(c));
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.label()));
        }
    }
}
