//! Addition instructions: class template, caption-then-rewrite, and
//! referring expressions, optionally suffixed with a coarse location.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::backends::{Captioner, ChatTranscript, ChatTurn, InstructionWriter, Role};
use crate::error::{Error, Result};
use crate::model::{
    DatasetManifest, EditPairRecord, FunnelStats, Instruction, InstructionKind, LocationCell, ManifestEntry,
};
use crate::post_removal::{composite_on_mean, region_weights, RegionWeighting};
use crate::raster::{same_dims, Mask, Rgb};

const DEFAULT_ICL_BANK: &str = include_str!("../data/icl_bank.json");
pub const DEFAULT_ICL_K: usize = 5;

fn require_label(label: &str) -> Result<()> {
    if label.trim().is_empty() {
        Err(Error::Precondition("object label must be non-empty".into()))
    } else {
        Ok(())
    }
}

/// "an" before a leading vowel letter, "a" otherwise.
pub fn article(phrase: &str) -> &'static str {
    match phrase.trim_start().chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn add_phrase(phrase: &str) -> String {
    let phrase = phrase.trim();
    format!("add {} {phrase}", article(phrase))
}

pub fn class_instruction(object_label: &str) -> Result<Instruction> {
    require_label(object_label)?;
    Instruction::new(add_phrase(object_label), InstructionKind::ClassTemplate)
}

pub fn reference_instruction(reference_text: &str) -> Result<Instruction> {
    if reference_text.trim().is_empty() {
        return Err(Error::Precondition("reference text must be non-empty".into()));
    }
    Instruction::new(add_phrase(reference_text), InstructionKind::Reference)
}

pub fn build_vlm_prompt(object_label: &str) -> Result<String> {
    require_label(object_label)?;
    Ok(format!(
        "Accurately describe the main characteristics of the {object_label}. Use few words which best describe the {object_label}"
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub caption: String,
    pub label: String,
    pub response: String,
}

/// Worked caption → instruction examples shown to the writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IclBank {
    pub examples: Vec<IclExample>,
}

impl Default for IclBank {
    fn default() -> Self {
        IclBank::from_json(DEFAULT_ICL_BANK).expect("bundled ICL bank parses")
    }
}

impl IclBank {
    pub fn from_json(text: &str) -> Result<Self> {
        let examples: Vec<IclExample> = serde_json::from_str(text)?;
        if examples.iter().any(|e| e.caption.trim().is_empty() || e.response.trim().is_empty()) {
            return Err(Error::Config("ICL examples need a caption and a response".into()));
        }
        Ok(IclBank { examples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::manifest::read_text(path)?)
    }
}

pub fn icl_user_turn(caption: &str, object_label: &str) -> String {
    let caption = caption.trim().trim_end_matches('.');
    format!(
        "Convert the following sentence into a short image addition instruction: {caption}. \
         Use straightforward language and describe only the {object_label}. \
         Ignore surroundings and background and avoid pictorial description."
    )
}

/// `k` worked examples followed by the query; the reply slot is left open.
pub fn build_icl_transcript(caption: &str, object_label: &str, examples: &[IclExample], k: usize) -> Result<ChatTranscript> {
    if examples.len() != k {
        return Err(Error::Precondition(format!("expected {k} ICL examples, got {}", examples.len())));
    }
    let mut turns = Vec::with_capacity(2 * k + 1);
    for ex in examples {
        turns.push(ChatTurn {
            role: Role::User,
            content: icl_user_turn(&ex.caption, &ex.label),
        });
        turns.push(ChatTurn {
            role: Role::Assistant,
            content: ex.response.clone(),
        });
    }
    turns.push(ChatTurn {
        role: Role::User,
        content: icl_user_turn(caption, object_label),
    });
    Ok(ChatTranscript { turns })
}

/// Captions the object on a mean-color background, then has the writer turn
/// the caption into an instruction.
pub fn vlm_llm_instruction(
    image: &Rgb,
    mask: &Mask,
    object_label: &str,
    captioner: &dyn Captioner,
    writer: &dyn InstructionWriter,
    bank: &IclBank,
    weighting: RegionWeighting,
) -> Result<Instruction> {
    same_dims(image.dimensions(), mask.dimensions())?;
    crate::pre_removal::require_non_empty(mask)?;
    let prompt = build_vlm_prompt(object_label)?;
    let isolated = composite_on_mean(image, &region_weights(mask, weighting))?.quantize();
    let caption = captioner.describe(&isolated, &prompt)?;
    if caption.trim().is_empty() {
        return Err(Error::InstructionGeneration {
            stage: "caption",
            message: "captioner returned empty text".into(),
        });
    }
    let transcript = build_icl_transcript(&caption, object_label, &bank.examples, bank.examples.len())?;
    let text = writer.complete(&transcript)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::InstructionGeneration {
            stage: "rewrite",
            message: "writer returned empty text".into(),
        });
    }
    let mut instruction = Instruction::new(text, InstructionKind::VlmLlm)?;
    let digest = crate::raster::sha256_hex(serde_json::to_string(&transcript)?.as_bytes());
    instruction.provenance.insert("caption".into(), caption);
    instruction.provenance.insert("transcript_sha256".into(), digest);
    Ok(instruction)
}

/// Cell of the mask centroid on a 3×3 grid; a centroid on a boundary goes to
/// the cell before it.
pub fn location_phrase(mask: &Mask) -> Result<LocationCell> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0u64);
    for (x, y, p) in mask.enumerate_pixels() {
        if crate::raster::is_set(p.0[0]) {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion);
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let third = |c: f64, extent: u32| {
        let e = extent as f64;
        if c * 3.0 <= e {
            0
        } else if c * 3.0 <= 2.0 * e {
            1
        } else {
            2
        }
    };
    let col = third(cx, mask.width());
    let row = third(cy, mask.height());
    Ok(LocationCell::GRID[row * 3 + col])
}

/// With probability `p`, appends "at the <cell> of the image".
pub fn attach_location<R: Rng + ?Sized>(instruction: Instruction, cell: LocationCell, p: f64, rng: &mut R) -> Instruction {
    let u: f64 = rng.random();
    if u < p {
        Instruction {
            text: format!("{} at the {} of the image", instruction.text, cell.label()),
            location_phrase: Some(cell),
            ..instruction
        }
    } else {
        instruction
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RefEntry {
    ann_id: u64,
    #[serde(default)]
    sentences: Vec<RefSentence>,
}

#[derive(Debug, Clone, Deserialize)]
struct RefSentence {
    sent: String,
}

/// Referring expressions keyed by annotation id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceIndex {
    pub by_annotation: HashMap<u64, Vec<String>>,
}

impl ReferenceIndex {
    /// Reads a RefCOCO-style JSON list of `{ann_id, sentences: [{sent}]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<RefEntry> = serde_json::from_str(text)?;
        let mut by_annotation: HashMap<u64, Vec<String>> = HashMap::new();
        for e in entries {
            let sents = e.sentences.into_iter().map(|s| s.sent.trim().to_string()).filter(|s| !s.is_empty());
            by_annotation.entry(e.ann_id).or_default().extend(sents);
        }
        by_annotation.retain(|_, v| !v.is_empty());
        Ok(ReferenceIndex { by_annotation })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::manifest::read_text(path)?)
    }

    pub fn get(&self, annotation_id: u64) -> Option<&[String]> {
        self.by_annotation.get(&annotation_id).map(Vec::as_slice)
    }
}

/// Edit counts per instruction kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTally {
    pub per_kind: BTreeMap<InstructionKind, u64>,
}

impl InstructionTally {
    pub fn from_counts(counts: &[(InstructionKind, u64)]) -> Self {
        let mut t = InstructionTally::default();
        for &(k, n) in counts {
            *t.per_kind.entry(k).or_default() += n;
        }
        t
    }

    pub fn add(&mut self, kind: InstructionKind) {
        *self.per_kind.entry(kind).or_default() += 1;
    }

    pub fn total(&self) -> u64 {
        self.per_kind.values().sum()
    }
}

/// Builds the final manifest from accepted records. Every record needs at
/// least one instruction and a selected candidate.
pub fn assemble_dataset(
    records: &[EditPairRecord],
    config_digest: &str,
    funnel: FunnelStats,
) -> Result<(DatasetManifest, InstructionTally)> {
    let mut tally = InstructionTally::default();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        if r.instructions.is_empty() {
            return Err(Error::Manifest(format!("pair {} has no instruction", r.pair_id)));
        }
        let (Some(selected), Some(source)) = (r.selected_candidate, &r.source_image_ref) else {
            return Err(Error::Manifest(format!("pair {} has no selected candidate", r.pair_id)));
        };
        let seed = r
            .candidates
            .get(selected as usize)
            .map(|c| c.seed)
            .ok_or_else(|| Error::Manifest(format!("pair {} selects a missing candidate", r.pair_id)))?;
        r.instructions.iter().for_each(|i| tally.add(i.kind));
        entries.push(ManifestEntry {
            pair_id: r.pair_id.clone(),
            source_image_ref: source.clone(),
            target_image_ref: r.target_image_ref.clone(),
            mask_ref: r.mask_ref.clone(),
            object_label: r.object_label.clone(),
            instructions: r.instructions.clone(),
            scores: r.scores.clone(),
            seed,
        });
    }
    let manifest = DatasetManifest {
        config_digest: config_digest.to_string(),
        funnel,
        entries,
    };
    manifest.validate()?;
    Ok((manifest, tally))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::make_stub_backends;
    use crate::raster::{empty_mask, MASK_ON};
    use crate::seed::rng_from_seed;
    use image::Luma;

    #[test]
    fn templates() {
        assert_eq!(class_instruction("cat").unwrap().text, "add a cat");
        assert_eq!(class_instruction("umbrella").unwrap().text, "add an umbrella");
        assert!(class_instruction("").is_err());
        assert_eq!(
            reference_instruction("man in a red shirt on the left").unwrap().text,
            "add a man in a red shirt on the left"
        );
        assert_eq!(reference_instruction("orange cat").unwrap().text, "add an orange cat");
        assert_eq!(reference_instruction("orange cat").unwrap().kind, InstructionKind::Reference);
        assert!(reference_instruction(" ").is_err());
    }

    #[test]
    fn vlm_prompt_verbatim() {
        let p = build_vlm_prompt("dog").unwrap();
        assert_eq!(
            p,
            "Accurately describe the main characteristics of the dog. Use few words which best describe the dog"
        );
        assert_eq!(build_vlm_prompt("zebra crossing").unwrap().matches("zebra crossing").count(), 2);
        assert!(!p.contains('<'));
    }

    #[test]
    fn transcript_shape() {
        let bank = IclBank::default();
        assert_eq!(bank.examples.len(), DEFAULT_ICL_K);
        let t = build_icl_transcript("a fluffy white towel", "towel", &bank.examples, 5).unwrap();
        assert_eq!(t.turns.len(), 11);
        for (i, turn) in t.turns.iter().enumerate() {
            assert_eq!(turn.role, if i % 2 == 0 { Role::User } else { Role::Assistant });
            if turn.role == Role::User {
                assert!(turn.content.contains("Ignore surroundings and background"));
            }
        }
        let hits: Vec<_> = t.turns.iter().filter(|t| t.content.contains("fluffy white towel")).collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].content, t.turns[10].content);
        assert!(build_icl_transcript("x", "y", &bank.examples[..4], 5).is_err());
    }

    fn mask_at(w: u32, h: u32, pixels: &[(u32, u32)]) -> Mask {
        let mut m = empty_mask(w, h);
        for &(x, y) in pixels {
            m.put_pixel(x, y, Luma([MASK_ON]));
        }
        m
    }

    #[test]
    fn location_cells() {
        assert_eq!(location_phrase(&mask_at(9, 9, &[(4, 4)])).unwrap(), LocationCell::Center);
        assert_eq!(location_phrase(&mask_at(10, 10, &[(0, 0)])).unwrap(), LocationCell::TopLeft);
        assert_eq!(location_phrase(&mask_at(6, 6, &[(1, 3), (2, 3)])).unwrap(), LocationCell::Left);
        assert_eq!(location_phrase(&mask_at(6, 6, &[(5, 5)])).unwrap(), LocationCell::BottomRight);
        assert!(location_phrase(&empty_mask(4, 4)).is_err());
    }

    #[test]
    fn location_extremes() {
        let mut rng = rng_from_seed(1);
        let base = class_instruction("cat").unwrap();
        for _ in 0..100 {
            assert_eq!(attach_location(base.clone(), LocationCell::Top, 0.0, &mut rng), base);
            let a = attach_location(base.clone(), LocationCell::Top, 1.0, &mut rng);
            assert_eq!(a.text, "add a cat at the top of the image");
            assert_eq!(a.location_phrase, Some(LocationCell::Top));
        }
    }

    #[test]
    fn vlm_instruction_with_stubs() {
        let b = make_stub_backends(3);
        let img = Rgb::from_fn(12, 12, |x, y| image::Rgb([(x * 20) as u8, (y * 20) as u8, 50]));
        let mask = mask_at(12, 12, &[(5, 5), (6, 5), (5, 6), (6, 6)]);
        let run = || {
            vlm_llm_instruction(
                &img,
                &mask,
                "dog",
                b.captioner.as_ref(),
                b.writer.as_ref(),
                &IclBank::default(),
                RegionWeighting::new(1, 0.5),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.kind, InstructionKind::VlmLlm);
        let caption = b
            .captioner
            .describe(
                &composite_on_mean(&img, &region_weights(&mask, RegionWeighting::new(1, 0.5)))
                    .unwrap()
                    .quantize(),
                &build_vlm_prompt("dog").unwrap(),
            )
            .unwrap();
        assert_eq!(a.provenance["caption"], caption);
    }

    #[test]
    fn reference_index_parses() {
        let idx = ReferenceIndex::from_json(
            r#"[{"ann_id": 4, "ref_id": 1, "sentences": [{"sent": "left dog"}, {"sent": " "}]},
                {"ann_id": 5, "sentences": []}]"#,
        )
        .unwrap();
        assert_eq!(idx.get(4).unwrap(), ["left dog".to_string()]);
        assert!(idx.get(5).is_none());
    }

    #[test]
    fn tally_arithmetic() {
        let t = InstructionTally::from_counts(&[
            (InstructionKind::ClassTemplate, 887_773),
            (InstructionKind::VlmLlm, 887_773),
            (InstructionKind::Reference, 104_373),
        ]);
        assert_eq!(t.total(), 1_879_919);
    }
}
