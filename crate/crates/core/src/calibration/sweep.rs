//! Success-vs-filtered curves and plateau detection.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{CandidateKey, Filter, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// Scores above the threshold are removed.
    FilterHigh,
    /// Scores below the threshold are removed.
    FilterLow,
}

impl Orientation {
    pub fn removes(self, score: f64, threshold: f64) -> bool {
        match self {
            Orientation::FilterHigh => score > threshold,
            Orientation::FilterLow => score < threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub filtered_pct: f64,
    /// `None` when the filter removes everything.
    pub success_pct_retained: Option<f64>,
    pub filtered: u64,
    pub retained: u64,
    pub retained_success: u64,
}

/// `100·num/den` rounded half-up to one decimal, from integers.
pub fn pct_tenths(num: u64, den: u64) -> f64 {
    let tenths = (2000 * num + den) / (2 * den);
    tenths as f64 / 10.0
}

pub fn sweep_threshold(
    labels: &BTreeMap<CandidateKey, Label>,
    scores: &HashMap<CandidateKey, f64>,
    thresholds: &[f64],
    orientation: Orientation,
) -> Result<Vec<SweepPoint>> {
    if labels.is_empty() {
        return Err(Error::Calibration("no annotations to sweep".into()));
    }
    let scored: Vec<(f64, Label)> = labels
        .iter()
        .map(|(k, &l)| {
            scores.get(k).map(|&s| (s, l)).ok_or_else(|| {
                Error::Calibration(format!("annotated candidate {}#{} has no score", k.pair_id, k.candidate_index))
            })
        })
        .collect::<Result<_>>()?;
    let total = scored.len() as u64;
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let (mut filtered, mut retained_success) = (0u64, 0u64);
            for &(s, l) in &scored {
                if orientation.removes(s, threshold) {
                    filtered += 1;
                } else if l == Label::Success {
                    retained_success += 1;
                }
            }
            let retained = total - filtered;
            SweepPoint {
                threshold,
                filtered_pct: pct_tenths(filtered, total),
                success_pct_retained: (retained > 0).then(|| pct_tenths(retained_success, retained)),
                filtered,
                retained,
                retained_success,
            }
        })
        .collect())
}

/// Distinct score values ordered from least to most filtering, plus one
/// threshold past the extreme so the curve ends with everything removed.
pub fn default_thresholds(scores: impl IntoIterator<Item = f64>, orientation: Orientation) -> Vec<f64> {
    let mut v: Vec<f64> = scores.into_iter().filter(|s| s.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let (Some(&lo), Some(&hi)) = (v.first(), v.last()) else {
        return v;
    };
    let step = ((hi - lo) / 100.0).max(1e-6);
    match orientation {
        Orientation::FilterHigh => {
            v.reverse();
            v.push(lo - step);
        }
        Orientation::FilterLow => {
            v.insert(0, lo);
            v.dedup();
            v.push(hi + step);
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub threshold: f64,
    pub index: usize,
    pub no_plateau: bool,
}

/// First point (by filtered share) from which every forward slope of the
/// success curve stays below `epsilon`. Points with no retained candidates
/// are ignored.
pub fn suggest_threshold(curve: &[SweepPoint], epsilon: f64) -> Result<Suggestion> {
    let mut pts: Vec<(usize, &SweepPoint)> = curve
        .iter()
        .enumerate()
        .filter(|(_, p)| p.success_pct_retained.is_some())
        .collect();
    if pts.len() < 3 {
        return Err(Error::Calibration(format!("need at least 3 defined sweep points, got {}", pts.len())));
    }
    pts.sort_by(|a, b| a.1.filtered_pct.total_cmp(&b.1.filtered_pct));
    let success = |p: &SweepPoint| p.success_pct_retained.expect("filtered above");
    let slopes: Vec<f64> = pts
        .windows(2)
        .map(|w| {
            let ds = success(w[1].1) - success(w[0].1);
            let df = w[1].1.filtered_pct - w[0].1.filtered_pct;
            if df == 0.0 {
                if ds == 0.0 {
                    0.0
                } else {
                    ds.signum() * f64::INFINITY
                }
            } else {
                ds / df
            }
        })
        .collect();
    // first index after the last slope that is not below epsilon
    let start = slopes.iter().rposition(|&s| s >= epsilon).map_or(0, |i| i + 1);
    if start >= slopes.len() {
        let (index, p) = *pts.last().expect("non-empty");
        return Ok(Suggestion {
            threshold: p.threshold,
            index,
            no_plateau: true,
        });
    }
    let (index, p) = pts[start];
    Ok(Suggestion {
        threshold: p.threshold,
        index,
        no_plateau: false,
    })
}

/// Config fragment setting each filter's threshold, e.g.
/// `[post_removal] consensus_threshold = 0.045`.
pub fn export_thresholds(suggestions: &[(Filter, f64)]) -> toml::Table {
    let mut root = toml::Table::new();
    for &(filter, value) in suggestions {
        let (section, key) = filter.config_key();
        let table = root
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(t) = table {
            t.insert(key.to_string(), toml::Value::Float(value));
        }
    }
    root
}
