#![allow(dead_code)]

use std::path::Path;

use pipe_core::synth::{apply_stub_thresholds, write_synthetic_corpus, SynthCorpus, SynthOptions};
use pipe_core::PipelineConfig;

pub fn stub_config(corpus: &SynthCorpus) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.ingest.annotations = Some(corpus.annotations.clone());
    cfg.ingest.images = Some(corpus.images.clone());
    cfg.instructions.references = Some(corpus.references.clone());
    apply_stub_thresholds(&mut cfg);
    cfg
}

pub fn corpus(dir: &Path) -> SynthCorpus {
    write_synthetic_corpus(&dir.join("corpus"), &SynthOptions::default()).unwrap()
}

use pipe_core::calibration::{CandidateInfo, CandidateKey, CandidateScores, Label};
use pipe_core::BlobRef;

/// Twenty candidates with consensus score `i/100`; candidates 1..=12 are
/// successes except 3 and 7, the rest failures.
pub fn planted_candidates() -> Vec<(CandidateInfo, Label)> {
    (1..=20u32)
        .map(|i| {
            let info = CandidateInfo {
                key: CandidateKey::new(format!("p{i:02}"), 0),
                object_label: "dog".into(),
                target_image_ref: BlobRef(format!("t{i}.png")),
                candidate_image_ref: BlobRef(format!("c{i}.png")),
                mask_ref: BlobRef(format!("m{i}.png")),
                scores: CandidateScores {
                    consensus: Some(i as f64 / 100.0),
                    mm_clip: Some(1.0 - i as f64 / 100.0),
                    importance: None,
                },
            };
            let label = if i <= 12 && i != 3 && i != 7 { Label::Success } else { Label::Failure };
            (info, label)
        })
        .collect()
}

/// (threshold, filtered %, success % of retained), worked out by hand.
pub const PLANTED_TABLE: [(f64, f64, Option<f64>); 5] = [
    (0.20, 0.0, Some(50.0)),
    (0.15, 25.0, Some(66.7)),
    (0.10, 50.0, Some(80.0)),
    (0.05, 75.0, Some(80.0)),
    (0.00, 100.0, None),
];
