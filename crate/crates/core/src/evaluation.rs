//! Editing-model metrics: pixel distances, embedding similarities, CMMD,
//! directional similarity, guidance trade-off sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSet, Denoiser, Embedder};
use crate::error::{Error, Result};
use crate::guidance::sampler::{edit_once, LatentCodec, SamplingSchedule};
use crate::guidance::GuidanceScales;
use crate::model::{cosine, EmbeddingVector};
use crate::raster::{same_dims, Rgb, RgbF};

/// RGB scaled to [0, 1].
pub fn to_unit_rgb(image: &Rgb) -> RgbF {
    RgbF {
        width: image.width(),
        height: image.height(),
        data: image.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect(),
    }
}

fn pixel_mean(a: &RgbF, b: &RgbF, f: impl Fn(f64) -> f64) -> Result<f64> {
    same_dims((a.width, a.height), (b.width, b.height))?;
    if a.data.is_empty() {
        return Err(Error::Precondition("empty image".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |c| p[c] - q[c]))
        .map(f)
        .sum();
    Ok(sum / (a.data.len() * 3) as f64)
}

/// Mean absolute difference over pixels and channels of [0, 1] images.
pub fn pixel_l1(a: &RgbF, b: &RgbF) -> Result<f64> {
    pixel_mean(a, b, f64::abs)
}

/// Mean squared difference over pixels and channels of [0, 1] images.
pub fn pixel_l2(a: &RgbF, b: &RgbF) -> Result<f64> {
    pixel_mean(a, b, |d| d * d)
}

pub fn embedding_similarity(a: &Rgb, b: &Rgb, embedder: &dyn Embedder) -> Result<f64> {
    embedder.embed_image(a)?.cosine(&embedder.embed_image(b)?)
}

fn require_caption(caption: &str) -> Result<()> {
    if caption.trim().is_empty() {
        Err(Error::Precondition("caption must be non-empty".into()))
    } else {
        Ok(())
    }
}

pub fn clip_t(edited: &Rgb, caption: &str, embedder: &dyn Embedder) -> Result<f64> {
    require_caption(caption)?;
    embedder.embed_image(edited)?.cosine(&embedder.embed_text(caption)?)
}

/// Cosine between two difference vectors; a zero difference is undefined.
pub fn directional_from_embeddings(
    src_img: &EmbeddingVector,
    tgt_img: &EmbeddingVector,
    src_txt: &EmbeddingVector,
    tgt_txt: &EmbeddingVector,
) -> Result<f64> {
    let diff = |a: &EmbeddingVector, b: &EmbeddingVector| -> Result<Vec<f64>> {
        if a.dim() != b.dim() {
            return Err(Error::dims(a.dim(), b.dim()));
        }
        Ok(b.values.iter().zip(&a.values).map(|(b, a)| b - a).collect())
    };
    let di = diff(src_img, tgt_img)?;
    let dt = diff(src_txt, tgt_txt)?;
    if di.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedDirection("image"));
    }
    if dt.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedDirection("text"));
    }
    cosine(&di, &dt)
}

pub fn directional_clip_similarity(
    src_img: &Rgb,
    tgt_img: &Rgb,
    src_caption: &str,
    tgt_caption: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    require_caption(src_caption)?;
    require_caption(tgt_caption)?;
    directional_from_embeddings(
        &embedder.embed_image(src_img)?,
        &embedder.embed_image(tgt_img)?,
        &embedder.embed_text(src_caption)?,
        &embedder.embed_text(tgt_caption)?,
    )
}

pub const DEFAULT_CMMD_BANDWIDTH: f64 = 10.0;
pub const DEFAULT_CMMD_SCALE: f64 = 1000.0;

fn check_set(set: &[EmbeddingVector], dim: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Precondition("CMMD needs non-empty sets".into()));
    }
    match set.iter().find(|e| e.dim() != dim) {
        Some(bad) => Err(Error::dims(dim, bad.dim())),
        None => Ok(()),
    }
}

fn mean_kernel(a: &[EmbeddingVector], b: &[EmbeddingVector], gamma: f64) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            let d2: f64 = x.values.iter().zip(&y.values).map(|(p, q)| (p - q) * (p - q)).sum();
            sum += (-gamma * d2).exp();
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Squared MMD under a Gaussian kernel, all-pairs (V-statistic) form, times `scale`.
pub fn cmmd(set_a: &[EmbeddingVector], set_b: &[EmbeddingVector], bandwidth: f64, scale: f64) -> Result<f64> {
    let dim = set_a.first().map(EmbeddingVector::dim).unwrap_or(0);
    check_set(set_a, dim)?;
    check_set(set_b, dim)?;
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::Precondition(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let kaa = mean_kernel(set_a, set_a, gamma);
    let kbb = mean_kernel(set_b, set_b, gamma);
    let kab = mean_kernel(set_a, set_b, gamma);
    Ok(scale * (kaa + kbb - 2.0 * kab))
}

/// Word-level rule for the object-addition subset of an editing benchmark.
pub fn magicbrush_add_filter(instruction: &str) -> bool {
    let lower = instruction.to_lowercase();
    let tokens: Vec<&str> = lower.split(|c: char| !c.is_alphabetic()).filter(|t| !t.is_empty()).collect();
    let has = |w: &str| tokens.contains(&w);
    (has("add") || has("put")) && !has("remove") && !has("and")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "clip-i")]
    ClipI,
    #[serde(rename = "dino")]
    Dino,
    #[serde(rename = "clip-t")]
    ClipT,
    #[serde(rename = "cmmd")]
    Cmmd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::L1, Metric::L2, Metric::ClipI, Metric::Dino, Metric::ClipT, Metric::Cmmd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::ClipI => "clip-i",
            Metric::Dino => "dino",
            Metric::ClipT => "clip-t",
            Metric::Cmmd => "cmmd",
        }
    }

    /// Parses a comma-separated list such as `l1,l2,cmmd`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out: Vec<Metric> = s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// An image tagged with its pair id; references may carry the target caption.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub pair_id: String,
    pub image: Rgb,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pair_id: String,
    pub values: BTreeMap<Metric, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metrics: Vec<Metric>,
    pub rows: Vec<MetricRow>,
    /// Mean of each per-pair metric over the rows without errors.
    pub aggregate: BTreeMap<Metric, f64>,
    pub cmmd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmdParams {
    pub bandwidth: f64,
    pub scale: f64,
}

impl Default for CmmdParams {
    fn default() -> Self {
        CmmdParams {
            bandwidth: DEFAULT_CMMD_BANDWIDTH,
            scale: DEFAULT_CMMD_SCALE,
        }
    }
}

fn row_metrics(out: &Rgb, reference: &EvalImage, metrics: &[Metric], backends: &BackendSet) -> Result<BTreeMap<Metric, f64>> {
    let mut values = BTreeMap::new();
    let (a, b) = (to_unit_rgb(out), to_unit_rgb(&reference.image));
    for &m in metrics {
        let v = match m {
            Metric::L1 => pixel_l1(&a, &b)?,
            Metric::L2 => pixel_l2(&a, &b)?,
            Metric::ClipI => embedding_similarity(out, &reference.image, backends.embedder.as_ref())?,
            Metric::Dino => embedding_similarity(out, &reference.image, backends.dino.as_ref())?,
            Metric::ClipT => {
                let caption = reference
                    .caption
                    .as_deref()
                    .ok_or_else(|| Error::Precondition("reference has no caption".into()))?;
                clip_t(out, caption, backends.embedder.as_ref())?
            }
            Metric::Cmmd => continue,
        };
        values.insert(m, v);
    }
    Ok(values)
}

/// Per-pair metrics against the references with the same pair id, aggregate
/// means, and one CMMD over the matched sets.
pub fn evaluate_pairs(
    outputs: &[EvalImage],
    references: &[EvalImage],
    backends: &BackendSet,
    metrics: &[Metric],
    cmmd_params: CmmdParams,
) -> Result<MetricTable> {
    let refs: BTreeMap<&str, &EvalImage> = references.iter().map(|r| (r.pair_id.as_str(), r)).collect();
    let rows: Vec<(MetricRow, bool)> = outputs
        .par_iter()
        .map(|o| {
            let result = match refs.get(o.pair_id.as_str()) {
                None => Err(Error::Precondition(format!("no reference for pair {}", o.pair_id))),
                Some(r) => row_metrics(&o.image, r, metrics, backends),
            };
            let matched = refs.contains_key(o.pair_id.as_str());
            let row = match result {
                Ok(values) => MetricRow {
                    pair_id: o.pair_id.clone(),
                    values,
                    error: None,
                },
                Err(e) => MetricRow {
                    pair_id: o.pair_id.clone(),
                    values: BTreeMap::new(),
                    error: Some(e.to_string()),
                },
            };
            (row, matched)
        })
        .collect();
    if !rows.iter().any(|(_, matched)| *matched) {
        return Err(Error::Precondition("no output matches a reference".into()));
    }
    let ok: Vec<&MetricRow> = rows.iter().map(|(r, _)| r).filter(|r| r.error.is_none()).collect();
    let mut aggregate = BTreeMap::new();
    for &m in metrics.iter().filter(|&&m| m != Metric::Cmmd) {
        if !ok.is_empty() {
            aggregate.insert(m, ok.iter().map(|r| r.values[&m]).sum::<f64>() / ok.len() as f64);
        }
    }
    let cmmd_value = if metrics.contains(&Metric::Cmmd) {
        let matched: Vec<(&EvalImage, &EvalImage)> = outputs
            .iter()
            .filter_map(|o| refs.get(o.pair_id.as_str()).map(|r| (o, *r)))
            .collect();
        let embed = |img: &Rgb| backends.embedder.embed_image(img);
        let a = matched.par_iter().map(|(o, _)| embed(&o.image)).collect::<Result<Vec<_>>>()?;
        let b = matched.par_iter().map(|(_, r)| embed(&r.image)).collect::<Result<Vec<_>>>()?;
        Some(cmmd(&a, &b, cmmd_params.bandwidth, cmmd_params.scale)?)
    } else {
        None
    };
    Ok(MetricTable {
        metrics: metrics.to_vec(),
        rows: rows.into_iter().map(|(r, _)| r).collect(),
        aggregate,
        cmmd: cmmd_value,
    })
}

impl MetricTable {
    /// Delimited text: header `pair_id,<metrics...>,error`, one row per pair,
    /// then a `mean` row; CMMD appears only on the `mean` row.
    pub fn to_delimited(&self, sep: char) -> String {
        let mut out = String::new();
        let header: Vec<&str> = std::iter::once("pair_id")
            .chain(self.metrics.iter().map(|m| m.name()))
            .chain(std::iter::once("error"))
            .collect();
        out.push_str(&header.join(&sep.to_string()));
        out.push('\n');
        let fmt = |v: Option<&f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let mut cells = vec![r.pair_id.clone()];
            cells.extend(self.metrics.iter().map(|m| fmt(r.values.get(m))));
            cells.push(r.error.clone().unwrap_or_default().replace([sep, '\n'], " "));
            out.push_str(&cells.join(&sep.to_string()));
            out.push('\n');
        }
        let mut cells = vec!["mean".to_string()];
        cells.extend(self.metrics.iter().map(|m| {
            if *m == Metric::Cmmd {
                fmt(self.cmmd.as_ref())
            } else {
                fmt(self.aggregate.get(m))
            }
        }));
        cells.push(String::new());
        out.push_str(&cells.join(&sep.to_string()));
        out.push('\n');
        out
    }
}

/// Something that edits an image given an instruction and guidance scales.
pub trait Editor: Send + Sync {
    fn edit(&self, image: &Rgb, instruction: &str, scales: GuidanceScales) -> Result<Rgb>;
}

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEditor;

impl Editor for IdentityEditor {
    fn edit(&self, image: &Rgb, _instruction: &str, _scales: GuidanceScales) -> Result<Rgb> {
        Ok(image.clone())
    }
}

/// Encode, one guided edit, decode.
pub struct LatentEditor<C> {
    pub codec: C,
    pub denoiser: std::sync::Arc<dyn Denoiser>,
    pub text_encoder: std::sync::Arc<dyn Embedder>,
    pub schedule: SamplingSchedule,
    pub seed: u64,
}

impl<C: LatentCodec + Send + Sync> Editor for LatentEditor<C> {
    fn edit(&self, image: &Rgb, instruction: &str, scales: GuidanceScales) -> Result<Rgb> {
        let z = self.codec.encode(image)?;
        let c_text = self.text_encoder.embed_text(instruction)?.values;
        let out = edit_once(&z, &c_text, self.denoiser.as_ref(), scales, &self.schedule, self.seed, 0)?;
        self.codec.decode(&out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalExample {
    pub source: Rgb,
    pub instruction: String,
    pub source_caption: String,
    pub target_caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub s_text: f64,
    pub s_image: f64,
    pub clip_image_similarity: f64,
    /// Mean over examples with a defined direction; `None` when there are none.
    pub directional_similarity: Option<f64>,
    pub directional_count: usize,
}

/// `1.0, 1.25, …, 2.5`.
pub fn default_image_scales() -> Vec<f64> {
    (0..=6).map(|i| 1.0 + 0.25 * i as f64).collect()
}

pub const DEFAULT_SWEEP_TEXT_SCALE: f64 = 7.0;

pub fn tradeoff_sweep(
    editor: &dyn Editor,
    examples: &[EvalExample],
    s_text: f64,
    s_image_values: &[f64],
    embedder: &dyn Embedder,
) -> Result<Vec<TradeoffPoint>> {
    if examples.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    let src: Vec<EmbeddingVector> = examples.iter().map(|e| embedder.embed_image(&e.source)).collect::<Result<_>>()?;
    let texts: Vec<(EmbeddingVector, EmbeddingVector)> = examples
        .iter()
        .map(|e| Ok((embedder.embed_text(&e.source_caption)?, embedder.embed_text(&e.target_caption)?)))
        .collect::<Result<_>>()?;
    s_image_values
        .iter()
        .map(|&s_image| {
            let scales = GuidanceScales::new(s_text, s_image)?;
            let per: Vec<(f64, Option<f64>)> = examples
                .par_iter()
                .zip(&src)
                .zip(&texts)
                .map(|((ex, s), (ts, tt))| {
                    let out = embedder.embed_image(&editor.edit(&ex.source, &ex.instruction, scales)?)?;
                    let sim = s.cosine(&out)?;
                    let dir = match directional_from_embeddings(s, &out, ts, tt) {
                        Ok(v) => Some(v),
                        Err(Error::UndefinedDirection(_)) => None,
                        Err(e) => return Err(e),
                    };
                    Ok((sim, dir))
                })
                .collect::<Result<_>>()?;
            let dirs: Vec<f64> = per.iter().filter_map(|p| p.1).collect();
            Ok(TradeoffPoint {
                s_text,
                s_image,
                clip_image_similarity: per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64,
                directional_similarity: (!dirs.is_empty()).then(|| dirs.iter().sum::<f64>() / dirs.len() as f64),
                directional_count: dirs.len(),
            })
        })
        .collect()
}

/// Columns: `s_text s_image clip_image_similarity directional_similarity directional_count`.
pub fn tradeoff_table(points: &[TradeoffPoint], sep: char) -> String {
    let mut out = ["s_text", "s_image", "clip_image_similarity", "directional_similarity", "directional_count"].join(&sep.to_string());
    out.push('\n');
    for p in points {
        let dir = p.directional_similarity.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{}{sep}{}{sep}{:.6}{sep}{dir}{sep}{}",
            p.s_text, p.s_image, p.clip_image_similarity, p.directional_count
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::make_stub_backends;

    fn gray(v: f64) -> RgbF {
        RgbF {
            width: 1,
            height: 1,
            data: vec![[v; 3]],
        }
    }

    #[test]
    fn pixel_fixture() {
        assert_eq!(pixel_l1(&gray(0.25), &gray(0.75)).unwrap(), 0.5);
        assert_eq!(pixel_l2(&gray(0.25), &gray(0.75)).unwrap(), 0.25);
        assert_eq!(pixel_l1(&gray(0.75), &gray(0.25)).unwrap(), 0.5);
        assert_eq!(pixel_l1(&gray(0.3), &gray(0.3)).unwrap(), 0.0);
        let wide = RgbF {
            width: 2,
            height: 1,
            data: vec![[0.0; 3]; 2],
        };
        assert!(pixel_l1(&gray(0.0), &wide).is_err());
    }

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::raw(x.to_vec())
    }

    #[test]
    fn cmmd_single_pair() {
        let r = cmmd(&[v(&[1.0, 0.0])], &[v(&[0.0, 1.0])], 1.0, 1.0).unwrap();
        assert!((r - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        let s = [v(&[0.1, 0.2]), v(&[0.3, -0.4])];
        assert_eq!(cmmd(&s, &s, 10.0, 1000.0).unwrap(), 0.0);
        assert!(cmmd(&[], &s, 1.0, 1.0).is_err());
        assert!(cmmd(&s, &[v(&[1.0])], 1.0, 1.0).is_err());
    }

    #[test]
    fn add_filter_rules() {
        assert!(magicbrush_add_filter("Add a cat on the sofa"));
        assert!(!magicbrush_add_filter("add a dog and a ball"));
        assert!(!magicbrush_add_filter("put a hat, remove the glasses"));
        assert!(magicbrush_add_filter("put a band poster on the wall"));
        assert!(magicbrush_add_filter("PUT:a lamp!"));
        assert!(!magicbrush_add_filter("make the sky blue"));
        assert!(!magicbrush_add_filter("adding a tree"));
    }

    #[test]
    fn directional_fixtures() {
        let z = v(&[0.0, 0.0]);
        assert_eq!(directional_from_embeddings(&z, &v(&[1.0, 0.0]), &z, &v(&[2.0, 0.0])).unwrap(), 1.0);
        assert_eq!(directional_from_embeddings(&z, &v(&[1.0, 0.0]), &z, &v(&[0.0, 3.0])).unwrap(), 0.0);
        assert!(matches!(
            directional_from_embeddings(&z, &z, &z, &v(&[1.0, 0.0])),
            Err(Error::UndefinedDirection("image"))
        ));
    }

    #[test]
    fn metric_names_round_trip() {
        assert_eq!(Metric::parse_list("l1,l2,clip-i,dino,clip-t,cmmd").unwrap(), Metric::ALL.to_vec());
        assert!(Metric::parse_list("l1,fid").is_err());
    }

    #[test]
    fn identity_sweep() {
        let b = make_stub_backends(2);
        let img = Rgb::from_fn(4, 4, |x, y| image::Rgb([x as u8 * 60, y as u8 * 60, 9]));
        let ex = EvalExample {
            source: img,
            instruction: "add a cat".into(),
            source_caption: "a room".into(),
            target_caption: "a room with a cat".into(),
        };
        let pts = tradeoff_sweep(&IdentityEditor, &[ex], 7.0, &default_image_scales(), b.embedder.as_ref()).unwrap();
        assert_eq!(pts.len(), 7);
        assert_eq!(pts.last().unwrap().s_image, 2.5);
        for p in &pts {
            assert!((p.clip_image_similarity - 1.0).abs() < 1e-12);
            assert_eq!(p.directional_similarity, None);
        }
        assert!(tradeoff_sweep(&IdentityEditor, &[], 7.0, &[1.0], b.embedder.as_ref()).is_err());
        let table = tradeoff_table(&pts, '\t');
        assert!(table.starts_with("s_text\ts_image\tclip_image_similarity\tdirectional_similarity\tdirectional_count\n"));
        assert_eq!(table.lines().count(), 8);
    }
}
