//! Human labels on removal candidates, threshold sweeps over those labels,
//! and plateau-based threshold suggestions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;
use crate::error::{Error, Result};
use crate::model::EditPairRecord;

pub mod service;
pub mod sweep;

pub use sweep::{
    default_thresholds, export_thresholds, suggest_threshold, sweep_threshold, Orientation, Suggestion, SweepPoint,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateKey {
    pub pair_id: String,
    pub candidate_index: u32,
}

impl CandidateKey {
    pub fn new(pair_id: impl Into<String>, candidate_index: u32) -> Self {
        CandidateKey {
            pair_id: pair_id.into(),
            candidate_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub key: CandidateKey,
    pub label: Label,
    pub annotator_id: String,
    pub created_seq: u64,
}

/// The filters whose thresholds can be calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Consensus,
    MmClip,
    Importance,
}

impl Filter {
    pub const ALL: [Filter; 3] = [Filter::Consensus, Filter::MmClip, Filter::Importance];

    pub fn name(self) -> &'static str {
        match self {
            Filter::Consensus => "consensus",
            Filter::MmClip => "mm_clip",
            Filter::Importance => "importance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Calibration(format!("unknown filter {s:?}")))
    }

    /// All three reject candidates whose score is above the threshold.
    pub fn orientation(self) -> Orientation {
        Orientation::FilterHigh
    }

    /// Dotted pipeline-config key of this filter's threshold.
    pub fn config_key(self) -> (&'static str, &'static str) {
        match self {
            Filter::Consensus => ("post_removal", "consensus_threshold"),
            Filter::MmClip => ("post_removal", "mm_threshold"),
            Filter::Importance => ("post_removal", "importance_threshold"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mm_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub importance: Option<f64>,
}

impl CandidateScores {
    pub fn get(&self, filter: Filter) -> Option<f64> {
        match filter {
            Filter::Consensus => self.consensus,
            Filter::MmClip => self.mm_clip,
            Filter::Importance => self.importance,
        }
    }
}

/// What the annotator sees for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    #[serde(flatten)]
    pub key: CandidateKey,
    pub object_label: String,
    pub target_image_ref: BlobRef,
    pub candidate_image_ref: BlobRef,
    pub mask_ref: BlobRef,
    pub scores: CandidateScores,
}

/// Candidates of every record that reached removal. The importance score is
/// attached to the candidate that was blended into the source.
pub fn candidates_from_records(records: &[EditPairRecord]) -> Vec<CandidateInfo> {
    let mut out = Vec::new();
    for r in records {
        let blended = crate::post_removal::blended_candidate(r);
        for c in &r.candidates {
            out.push(CandidateInfo {
                key: CandidateKey::new(&r.pair_id, c.candidate_index),
                object_label: r.object_label.clone(),
                target_image_ref: r.target_image_ref.clone(),
                candidate_image_ref: c.image_ref.clone(),
                mask_ref: r.mask_ref.clone(),
                scores: CandidateScores {
                    consensus: r.scores.consensus,
                    mm_clip: c.mm_clip_score,
                    importance: if blended == Some(c.candidate_index) { r.scores.importance } else { None },
                },
            });
        }
    }
    out
}

/// Seeded sample of `n` candidates; with `stratify`, labels take turns so
/// every class is represented as evenly as possible.
pub fn sample_candidates(candidates: &[CandidateInfo], n: usize, seed: u64, stratify: bool) -> Vec<CandidateKey> {
    let mut rng = crate::seed::rng_from_parts(&[b"calibration-sample", &seed.to_le_bytes()]);
    if !stratify {
        let mut keys: Vec<CandidateKey> = candidates.iter().map(|c| c.key.clone()).collect();
        keys.shuffle(&mut rng);
        keys.truncate(n);
        return keys;
    }
    let mut by_label: BTreeMap<&str, Vec<CandidateKey>> = BTreeMap::new();
    for c in candidates {
        by_label.entry(c.object_label.as_str()).or_default().push(c.key.clone());
    }
    for keys in by_label.values_mut() {
        keys.shuffle(&mut rng);
        keys.reverse();
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n && by_label.values().any(|v| !v.is_empty()) {
        for keys in by_label.values_mut() {
            if out.len() == n {
                break;
            }
            if let Some(k) = keys.pop() {
                out.push(k);
            }
        }
    }
    out
}

/// Annotations in memory, backed by an append-only JSON-lines log.
#[derive(Debug)]
pub struct AnnotationStore {
    known: BTreeSet<CandidateKey>,
    log: Vec<Annotation>,
    path: Option<PathBuf>,
    file: Option<File>,
}

impl AnnotationStore {
    pub fn in_memory(known: impl IntoIterator<Item = CandidateKey>) -> Self {
        AnnotationStore {
            known: known.into_iter().collect(),
            log: Vec::new(),
            path: None,
            file: None,
        }
    }

    /// Opens (or creates) the log at `path` and replays it.
    pub fn open(path: &Path, known: impl IntoIterator<Item = CandidateKey>) -> Result<Self> {
        let mut store = Self::in_memory(known);
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let a: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                store.log.push(a);
            }
        } else if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        store.path = Some(path.to_path_buf());
        store.file = Some(file);
        Ok(store)
    }

    pub fn log(&self) -> &[Annotation] {
        &self.log
    }

    pub fn is_known(&self, key: &CandidateKey) -> bool {
        self.known.contains(key)
    }

    pub fn last_seq(&self) -> u64 {
        self.log.last().map_or(0, |a| a.created_seq)
    }

    pub fn record(&mut self, key: CandidateKey, label: Label, annotator_id: &str) -> Result<Annotation> {
        if !self.known.contains(&key) {
            return Err(Error::UnknownCandidate {
                pair_id: key.pair_id,
                candidate_index: key.candidate_index,
            });
        }
        if annotator_id.trim().is_empty() {
            return Err(Error::Calibration("annotator id must be non-empty".into()));
        }
        let a = Annotation {
            key,
            label,
            annotator_id: annotator_id.to_string(),
            created_seq: self.last_seq() + 1,
        };
        if let Some(f) = self.file.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new("annotations"));
            let mut line = serde_json::to_string(&a)?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        self.log.push(a.clone());
        Ok(a)
    }

    /// Latest label per (candidate, annotator).
    pub fn live_labels(&self) -> BTreeMap<CandidateKey, BTreeMap<String, Label>> {
        let mut live: BTreeMap<CandidateKey, BTreeMap<String, (u64, Label)>> = BTreeMap::new();
        for a in &self.log {
            let slot = live.entry(a.key.clone()).or_default();
            match slot.get(&a.annotator_id) {
                Some(&(seq, _)) if seq > a.created_seq => {}
                _ => {
                    slot.insert(a.annotator_id.clone(), (a.created_seq, a.label));
                }
            }
        }
        live.into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|(who, (_, l))| (who, l)).collect()))
            .collect()
    }

    /// Majority vote across annotators; ties count as failure.
    pub fn effective_labels(&self) -> BTreeMap<CandidateKey, Label> {
        self.live_labels()
            .into_iter()
            .map(|(k, votes)| {
                let yes = votes.values().filter(|&&l| l == Label::Success).count();
                let label = if 2 * yes > votes.len() { Label::Success } else { Label::Failure };
                (k, label)
            })
            .collect()
    }
}

/// Scores of the annotated candidates for one filter, skipping those without one.
pub fn filter_scores(candidates: &[CandidateInfo], filter: Filter) -> HashMap<CandidateKey, f64> {
    candidates
        .iter()
        .filter_map(|c| c.scores.get(filter).map(|s| (c.key.clone(), s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys() -> Vec<CandidateKey> {
        (0..3).map(|i| CandidateKey::new("p", i)).collect()
    }

    #[test]
    fn last_write_wins_and_ties_fail() {
        let mut s = AnnotationStore::in_memory(keys());
        s.record(CandidateKey::new("p", 0), Label::Failure, "ann").unwrap();
        s.record(CandidateKey::new("p", 0), Label::Success, "ann").unwrap();
        s.record(CandidateKey::new("p", 1), Label::Success, "a").unwrap();
        s.record(CandidateKey::new("p", 1), Label::Failure, "b").unwrap();
        let eff = s.effective_labels();
        assert_eq!(eff[&CandidateKey::new("p", 0)], Label::Success);
        assert_eq!(eff[&CandidateKey::new("p", 1)], Label::Failure);
        assert_eq!(s.last_seq(), 4);
    }

    #[test]
    fn unknown_candidate_rejected() {
        let mut s = AnnotationStore::in_memory(keys());
        assert!(matches!(
            s.record(CandidateKey::new("q", 0), Label::Success, "a"),
            Err(Error::UnknownCandidate { .. })
        ));
        assert!(s.record(CandidateKey::new("p", 9), Label::Success, "a").is_err());
    }

    #[test]
    fn log_replay_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let mut s = AnnotationStore::open(&path, keys()).unwrap();
        for (i, l) in [Label::Success, Label::Failure, Label::Success].into_iter().enumerate() {
            s.record(CandidateKey::new("p", i as u32), l, "x").unwrap();
        }
        s.record(CandidateKey::new("p", 1), Label::Success, "x").unwrap();
        let replayed = AnnotationStore::open(&path, keys()).unwrap();
        assert_eq!(replayed.log(), s.log());
        assert_eq!(replayed.effective_labels(), s.effective_labels());
        let mut replayed = replayed;
        assert_eq!(replayed.record(CandidateKey::new("p", 2), Label::Failure, "y").unwrap().created_seq, 5);
    }

    fn info(pair: &str, label: &str) -> CandidateInfo {
        CandidateInfo {
            key: CandidateKey::new(pair, 0),
            object_label: label.into(),
            target_image_ref: BlobRef("t".into()),
            candidate_image_ref: BlobRef("c".into()),
            mask_ref: BlobRef("m".into()),
            scores: CandidateScores::default(),
        }
    }

    #[test]
    fn sampler_is_seeded_and_stratifies() {
        let cands: Vec<_> = (0..20)
            .map(|i| info(&format!("p{i}"), if i < 17 { "dog" } else { "cat" }))
            .collect();
        let a = sample_candidates(&cands, 6, 1, false);
        assert_eq!(a, sample_candidates(&cands, 6, 1, false));
        assert_eq!(a.len(), 6);
        let s = sample_candidates(&cands, 6, 1, true);
        let cats = s.iter().filter(|k| ["p17", "p18", "p19"].contains(&k.pair_id.as_str())).count();
        assert_eq!(cats, 3);
        assert_eq!(sample_candidates(&cands, 50, 1, true).len(), 20);
    }
}
