//! Stage runner over a work directory.
//!
//! Layout of a work directory:
//!
//! ```text
//! blobs/                      images, masks, candidates (content-addressed PNG)
//! <stage>.jsonl               records after each stage, ingest .. instructions
//! dataset.manifest.jsonl      final manifest, written by assemble
//! dataset.funnel.json         funnel, filtering-table rows, per-kind tallies
//! run.log.jsonl               timestamps and durations (never read back)
//! ```
//!
//! Every stage reads the previous stage's file and writes its own, so a run
//! interrupted mid-stage resumes by rerunning that stage.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::BackendSet;
use crate::blob::{BlobRef, BlobStore, LocalBlobStore};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{ingest_coco_with, IngestOptions};
use crate::instructions::{
    assemble_dataset, attach_location, class_instruction, location_phrase, reference_instruction, vlm_llm_instruction,
    IclBank, InstructionTally, ReferenceIndex,
};
use crate::manifest::{read_manifest, read_work, write_atomic, write_manifest, write_work, WorkManifest};
use crate::model::{DatasetManifest, EditPairRecord, FunnelStats, Gate, GateCount, StageFlag};
use crate::post_removal::{run_post_removal, PostRemovalInput, RegionWeighting};
use crate::pre_removal::{abnormality_score, dilate_with, dilation_radius, geometry_decision, GeometryDecision};
use crate::raster::{mask_area, same_dims, Mask, Rgb};
use crate::removal::{generate_candidates, store_candidates, GeneratedCandidate};
use crate::seed::{rng_from_parts, seed_from_parts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Prefilter,
    Remove,
    Postfilter,
    Instructions,
    Assemble,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Prefilter,
        Stage::Remove,
        Stage::Postfilter,
        Stage::Instructions,
        Stage::Assemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Prefilter => "prefilter",
            Stage::Remove => "remove",
            Stage::Postfilter => "postfilter",
            Stage::Instructions => "instructions",
            Stage::Assemble => "assemble",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }

    pub fn previous(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i])
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DATASET_FILE: &str = "dataset.manifest.jsonl";
pub const FUNNEL_FILE: &str = "dataset.funnel.json";
pub const RUN_LOG_FILE: &str = "run.log.jsonl";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blobs(&self) -> Result<LocalBlobStore> {
        LocalBlobStore::open(self.root.join("blobs"))
    }

    pub fn stage_path(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Assemble => self.dataset_path(),
            s => self.root.join(format!("{}.jsonl", s.name())),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join(DATASET_FILE)
    }

    pub fn funnel_path(&self) -> PathBuf {
        self.root.join(FUNNEL_FILE)
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(RUN_LOG_FILE)
    }

    /// Stages whose output exists, as a prefix of the stage order.
    pub fn completed(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .take_while(|&s| self.stage_path(s).is_file())
            .collect()
    }

    fn stage_digest(&self, stage: Stage) -> Result<String> {
        let path = self.stage_path(stage);
        Ok(match stage {
            Stage::Assemble => read_manifest(&path)?.config_digest,
            _ => read_work(&path)?.config_digest,
        })
    }

    /// Records as of the latest completed stage before assembly.
    pub fn latest_records(&self) -> Result<WorkManifest> {
        let last = self
            .completed()
            .into_iter()
            .rfind(|&s| s != Stage::Assemble)
            .ok_or_else(|| Error::Precondition(format!("no stage output in {}", self.root.display())))?;
        read_work(&self.stage_path(last))
    }

    fn log(&self, entry: serde_json::Value) -> Result<()> {
        let path = self.log_path();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{entry}").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Run even when existing outputs carry a different config digest.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// False when the stage was already complete under the same digest.
    pub ran: bool,
    pub survivors: u64,
}

pub fn run_stage(
    ws: &Workspace,
    stage: Stage,
    cfg: &PipelineConfig,
    backends: &BackendSet,
    opts: RunOptions,
) -> Result<StageOutcome> {
    let digest = cfg.digest()?;
    let completed = ws.completed();
    if stage.index() > completed.len() {
        return Err(Error::StageOrder {
            expected: Stage::ALL[completed.len()].name().to_string(),
            requested: stage.name().to_string(),
        });
    }
    if stage.index() < completed.len() {
        let existing = ws.stage_digest(stage)?;
        if existing == digest {
            let survivors = stage_survivors(ws, stage)?;
            ws.log(log_entry(stage, "skipped", &digest, survivors, 0))?;
            return Ok(StageOutcome { stage, ran: false, survivors });
        }
        if !opts.force {
            return Err(Error::ConfigDigestMismatch {
                manifest: existing,
                current: digest,
            });
        }
    }
    let input = match stage.previous() {
        None => None,
        Some(prev) => {
            let m = read_work(&ws.stage_path(prev))?;
            if m.config_digest != digest && !opts.force {
                return Err(Error::ConfigDigestMismatch {
                    manifest: m.config_digest,
                    current: digest,
                });
            }
            Some(m)
        }
    };

    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let store = ws.blobs()?;
    let ctx = StageContext {
        cfg,
        backends,
        store: &store,
        pool: &pool,
    };

    // outputs downstream of a rerun stage are stale
    for later in &Stage::ALL[stage.index() + 1..] {
        remove_if_exists(&ws.stage_path(*later))?;
        if *later == Stage::Assemble {
            remove_if_exists(&ws.funnel_path())?;
        }
    }

    let survivors = match (stage, input) {
        (Stage::Ingest, _) => {
            let out = ingest_stage(&ctx, &digest)?;
            write_work(&out, &ws.stage_path(stage))?;
            out.funnel.last_count().unwrap_or(0)
        }
        (Stage::Assemble, Some(input)) => {
            let (manifest, tally) = assemble_stage(input, &digest)?;
            write_manifest(&manifest, &ws.dataset_path())?;
            write_funnel_sidecar(&ws.funnel_path(), &manifest, &tally)?;
            manifest.entries.len() as u64
        }
        (_, Some(input)) => {
            let out = match stage {
                Stage::Prefilter => prefilter_stage(&ctx, input, &digest)?,
                Stage::Remove => remove_stage(&ctx, input, &digest)?,
                Stage::Postfilter => postfilter_stage(&ctx, input, &digest)?,
                Stage::Instructions => instructions_stage(&ctx, input, &digest)?,
                Stage::Ingest | Stage::Assemble => unreachable!("handled above"),
            };
            write_work(&out, &ws.stage_path(stage))?;
            out.funnel.last_count().unwrap_or(0)
        }
        (_, None) => unreachable!("every stage after ingest has an input"),
    };
    let elapsed = started.elapsed().as_millis() as u64;
    ws.log(log_entry(stage, "completed", &digest, survivors, elapsed))?;
    log::info!("{stage}: {survivors} records survive ({elapsed} ms)");
    Ok(StageOutcome { stage, ran: true, survivors })
}

/// Runs every stage not yet complete, in order.
pub fn run_all(ws: &Workspace, cfg: &PipelineConfig, backends: &BackendSet, opts: RunOptions) -> Result<Vec<StageOutcome>> {
    Stage::ALL
        .into_iter()
        .map(|s| run_stage(ws, s, cfg, backends, opts))
        .collect()
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn stage_survivors(ws: &Workspace, stage: Stage) -> Result<u64> {
    let path = ws.stage_path(stage);
    Ok(match stage {
        Stage::Assemble => read_manifest(&path)?.entries.len() as u64,
        _ => read_work(&path)?.funnel.last_count().unwrap_or(0),
    })
}

fn log_entry(stage: Stage, status: &str, digest: &str, survivors: u64, elapsed_ms: u64) -> serde_json::Value {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    serde_json::json!({
        "unix_ms": now,
        "stage": stage.name(),
        "status": status,
        "config_digest": digest,
        "survivors": survivors,
        "elapsed_ms": elapsed_ms,
    })
}

struct StageContext<'a> {
    cfg: &'a PipelineConfig,
    backends: &'a BackendSet,
    store: &'a LocalBlobStore,
    pool: &'a rayon::ThreadPool,
}

impl StageContext<'_> {
    /// Applies `f` to every record in parallel, keeping order.
    fn map_records<F>(&self, records: Vec<EditPairRecord>, f: F) -> Result<Vec<EditPairRecord>>
    where
        F: Fn(EditPairRecord) -> Result<EditPairRecord> + Sync + Send,
    {
        self.pool.install(|| records.into_par_iter().map(f).collect())
    }

    fn radius_of(&self, mask: &Mask) -> u32 {
        dilation_radius(mask_area(mask), &self.cfg.pre_removal.dilation)
    }

    fn weighting(&self, radius: u32) -> RegionWeighting {
        RegionWeighting {
            dilation_radius: radius,
            feather_sigma: self.cfg.post_removal.feather_sigma_rule.sigma(radius),
            element: self.cfg.pre_removal.dilation.element,
        }
    }

    fn load_pair(&self, r: &EditPairRecord) -> Result<(Rgb, Mask)> {
        let image = self.store.load_rgb(&r.target_image_ref)?;
        let mask = self.store.load_mask(&r.mask_ref)?;
        same_dims(image.dimensions(), mask.dimensions())?;
        Ok((image, mask))
    }
}

fn next_manifest(input: WorkManifest, stage: Stage, digest: &str, records: Vec<EditPairRecord>) -> WorkManifest {
    WorkManifest {
        stage: stage.name().to_string(),
        config_digest: digest.to_string(),
        funnel: input.funnel,
        records,
    }
}

fn count_through(records: &[EditPairRecord], gate: Gate) -> u64 {
    records.iter().filter(|r| r.passed_through(gate)).count() as u64
}

fn ingest_stage(ctx: &StageContext<'_>, digest: &str) -> Result<WorkManifest> {
    let ic = &ctx.cfg.ingest;
    let annotations = ic
        .annotations
        .as_ref()
        .ok_or_else(|| Error::Config("ingest.annotations is not set".into()))?;
    let image_dir = match &ic.images {
        Some(d) => d.clone(),
        None => annotations.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let opts = IngestOptions {
        source_tag: ic.source_tag.clone(),
        dedup_iou: ic.dedup_iou,
    };
    let ingested = ingest_coco_with(annotations, &image_dir, &opts)?;
    if ingested.warnings > 0 {
        log::warn!("ingest skipped {} annotations with missing images or categories", ingested.warnings);
    }

    // copy images into the blob store; refs become content hashes
    let stored: BTreeMap<String, (crate::model::ImageRecord, BlobRef)> = ctx.pool.install(|| {
        ingested
            .records
            .par_iter()
            .map(|rec| {
                let path = image_dir.join(rec.image_ref.as_str());
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let image = image::load_from_memory(&bytes)?.to_rgb8();
                same_dims((rec.width, rec.height), image.dimensions())?;
                let r = ctx.store.put_rgb(&image)?;
                Ok((rec.record_id.clone(), (rec.clone(), r)))
            })
            .collect::<Result<_>>()
    })?;
    let mut records: Vec<EditPairRecord> = ctx.pool.install(|| {
        ingested
            .masks
            .par_iter()
            .map(|m| {
                let (rec, image_ref) = &stored[&m.record_id];
                let mask_ref = ctx.store.put_mask(&m.mask)?;
                let mut rec = rec.clone();
                rec.image_ref = image_ref.clone();
                Ok(EditPairRecord::new(&rec, m.annotation_id, &m.object_label, mask_ref))
            })
            .collect::<Result<_>>()
    })?;
    records.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let mut funnel = FunnelStats::default();
    funnel.push(Stage::Ingest.name(), records.len() as u64);
    Ok(WorkManifest {
        stage: Stage::Ingest.name().to_string(),
        config_digest: digest.to_string(),
        funnel,
        records,
    })
}

fn prefilter_stage(ctx: &StageContext<'_>, input: WorkManifest, digest: &str) -> Result<WorkManifest> {
    let cfg = &ctx.cfg.pre_removal;
    let embedder = ctx.backends.embedder.as_ref();
    let records = ctx.map_records(input.records.clone(), |mut r| {
        if r.has_failed() {
            return Ok(r);
        }
        let (image, mask) = ctx.load_pair(&r)?;
        match geometry_decision(&mask, cfg) {
            GeometryDecision::Fail(why) => {
                r.set_flag(Gate::Geometry, StageFlag::fail(why));
                return Ok(r);
            }
            GeometryDecision::Pass => r.set_flag(Gate::Geometry, StageFlag::Pass),
        }
        let radius = ctx.radius_of(&mask);
        match abnormality_score(&image, &mask, &r.object_label, embedder, ctx.weighting(radius)) {
            Ok(score) => {
                r.scores.abnormality = Some(score);
                if score < cfg.abnormality_threshold {
                    r.set_flag(Gate::Abnormality, StageFlag::fail("abnormal_view"));
                    return Ok(r);
                }
            }
            Err(e) => {
                r.set_flag(Gate::Abnormality, StageFlag::fail(format!("backend: {e}")));
                return Ok(r);
            }
        }
        r.set_flag(Gate::Abnormality, StageFlag::Pass);
        let dilated = dilate_with(&mask, radius, cfg.dilation.element);
        r.dilated_mask_ref = Some(ctx.store.put_mask(&dilated)?);
        Ok(r)
    })?;
    let gates = vec![
        GateCount {
            name: Gate::Geometry.name().into(),
            count: count_through(&records, Gate::Geometry),
        },
        GateCount {
            name: Gate::Abnormality.name().into(),
            count: count_through(&records, Gate::Abnormality),
        },
    ];
    let mut out = next_manifest(input, Stage::Prefilter, digest, records);
    out.funnel.push_with_gates(Stage::Prefilter.name(), gates);
    Ok(out)
}

/// Per-record seed base, derived from the pair id so it does not depend on
/// record order or worker count.
pub fn record_seed_base(cfg: &PipelineConfig, pair_id: &str) -> u64 {
    seed_from_parts(&[
        b"removal",
        pair_id.as_bytes(),
        &cfg.seed.to_le_bytes(),
        &cfg.removal.seed_base.to_le_bytes(),
    ])
}

fn remove_stage(ctx: &StageContext<'_>, input: WorkManifest, digest: &str) -> Result<WorkManifest> {
    let rc = &ctx.cfg.removal;
    let inpainter = ctx.backends.inpainter.as_ref();
    let records = ctx.map_records(input.records.clone(), |mut r| {
        if !r.passed_through(Gate::Abnormality) {
            return Ok(r);
        }
        let image = ctx.store.load_rgb(&r.target_image_ref)?;
        let dilated_ref = r
            .dilated_mask_ref
            .clone()
            .ok_or_else(|| Error::Manifest(format!("pair {} passed prefilter without a dilated mask", r.pair_id)))?;
        let dilated = ctx.store.load_mask(&dilated_ref)?;
        let seed_base = record_seed_base(ctx.cfg, &r.pair_id);
        r.seed_base = Some(seed_base);
        match generate_candidates(&r.pair_id, &image, &dilated, &r.object_label, inpainter, rc.n_candidates, rc.steps, seed_base) {
            Ok(mut generated) => {
                store_candidates(ctx.store, &mut generated)?;
                r.candidates = generated.into_iter().map(|g| g.candidate).collect();
                r.set_flag(Gate::Inpaint, StageFlag::Pass);
            }
            Err(failure) => r.set_flag(Gate::Inpaint, StageFlag::fail(failure)),
        }
        Ok(r)
    })?;
    let count = count_through(&records, Gate::Inpaint);
    let mut out = next_manifest(input, Stage::Remove, digest, records);
    out.funnel.push(Stage::Remove.name(), count);
    Ok(out)
}

fn postfilter_stage(ctx: &StageContext<'_>, input: WorkManifest, digest: &str) -> Result<WorkManifest> {
    let records = ctx.map_records(input.records.clone(), |r| {
        if !r.passed_through(Gate::Inpaint) {
            return Ok(r);
        }
        let (image, mask) = ctx.load_pair(&r)?;
        let dilated = match &r.dilated_mask_ref {
            Some(d) => ctx.store.load_mask(d)?,
            None => return Err(Error::Manifest(format!("pair {} has no dilated mask", r.pair_id))),
        };
        let candidates = r
            .candidates
            .iter()
            .map(|c| {
                Ok(GeneratedCandidate {
                    candidate: c.clone(),
                    image: ctx.store.load_rgb(&c.image_ref)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let input = PostRemovalInput {
            original: &image,
            mask: &mask,
            dilated_mask: &dilated,
            dilation_radius: ctx.radius_of(&mask),
            candidates,
        };
        run_post_removal(r, input, ctx.backends, ctx.store, &ctx.cfg.post_removal)
    })?;
    let gates = [Gate::Consensus, Gate::MmClip, Gate::Importance]
        .into_iter()
        .map(|g| GateCount {
            name: g.name().into(),
            count: count_through(&records, g),
        })
        .collect();
    let mut out = next_manifest(input, Stage::Postfilter, digest, records);
    out.funnel.push_with_gates(Stage::Postfilter.name(), gates);
    Ok(out)
}

fn instructions_stage(ctx: &StageContext<'_>, input: WorkManifest, digest: &str) -> Result<WorkManifest> {
    let ic = &ctx.cfg.instructions;
    let bank = match &ic.icl_bank {
        Some(p) => IclBank::load(p)?,
        None => IclBank::default(),
    };
    let references = match &ic.references {
        Some(p) => Some(ReferenceIndex::load(p)?),
        None => None,
    };
    let b = ctx.backends;
    let records = ctx.map_records(input.records.clone(), |mut r| {
        if !r.passed_through(Gate::Importance) {
            return Ok(r);
        }
        let (image, mask) = ctx.load_pair(&r)?;
        let mut made = Vec::new();
        if ic.class_template {
            made.push(class_instruction(&r.object_label)?);
        }
        if ic.vlm_llm {
            let weighting = ctx.weighting(ctx.radius_of(&mask));
            made.push(vlm_llm_instruction(
                &image,
                &mask,
                &r.object_label,
                b.captioner.as_ref(),
                b.writer.as_ref(),
                &bank,
                weighting,
            )?);
        }
        if ic.reference {
            if let Some(text) = references.as_ref().and_then(|x| x.get(r.annotation_id)).and_then(|s| s.first()) {
                made.push(reference_instruction(text)?);
            }
        }
        let cell = location_phrase(&mask)?;
        let mut rng = rng_from_parts(&[b"location", r.pair_id.as_bytes(), &ctx.cfg.seed.to_le_bytes()]);
        r.instructions = made
            .into_iter()
            .map(|i| attach_location(i, cell, ic.location_probability, &mut rng))
            .collect();
        Ok(r)
    })?;
    let count = records.iter().filter(|r| !r.instructions.is_empty()).count() as u64;
    let mut out = next_manifest(input, Stage::Instructions, digest, records);
    out.funnel.push(Stage::Instructions.name(), count);
    Ok(out)
}

fn assemble_stage(input: WorkManifest, digest: &str) -> Result<(DatasetManifest, InstructionTally)> {
    let accepted: Vec<EditPairRecord> = input
        .records
        .into_iter()
        .filter(|r| !r.instructions.is_empty() && r.selected_candidate.is_some())
        .collect();
    let mut funnel = input.funnel;
    funnel.push(Stage::Assemble.name(), accepted.len() as u64);
    assemble_dataset(&accepted, digest, funnel)
}

/// Contents of the funnel sidecar next to the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelSidecar {
    pub config_digest: String,
    pub funnel: FunnelStats,
    pub table: FunnelReport,
    pub instructions_per_kind: InstructionTally,
    pub total_edits: u64,
}

fn write_funnel_sidecar(path: &Path, manifest: &DatasetManifest, tally: &InstructionTally) -> Result<()> {
    let sidecar = FunnelSidecar {
        config_digest: manifest.config_digest.clone(),
        funnel: manifest.funnel.clone(),
        table: emit_funnel_report(&manifest.funnel)?,
        instructions_per_kind: tally.clone(),
        total_edits: tally.total(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub stage: String,
    pub count: u64,
}

/// Survivor counts in the published filtering-table layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub rows: Vec<FunnelRow>,
}

/// Rows `Initial, Pre-Removal, Consensus, MM CLIP, Importance`, stopping at
/// the first stage the funnel has not reached.
pub fn emit_funnel_report(funnel: &FunnelStats) -> Result<FunnelReport> {
    if funnel.stages.is_empty() {
        return Err(Error::Precondition("funnel is empty".into()));
    }
    funnel.validate()?;
    let gate = |name: &str| {
        funnel
            .stage(Stage::Postfilter.name())
            .and_then(|s| s.gates.iter().find(|g| g.name == name))
            .map(|g| g.count)
    };
    let sources = [
        ("Initial", funnel.stage(Stage::Ingest.name()).map(|s| s.count)),
        ("Pre-Removal", funnel.stage(Stage::Prefilter.name()).map(|s| s.count)),
        ("Consensus", gate(Gate::Consensus.name())),
        ("MM CLIP", gate(Gate::MmClip.name())),
        ("Importance", gate(Gate::Importance.name())),
    ];
    let rows = sources
        .into_iter()
        .map_while(|(label, count)| {
            count.map(|count| FunnelRow {
                stage: label.to_string(),
                count,
            })
        })
        .collect();
    Ok(FunnelReport { rows })
}

impl FunnelReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("stage\tcount\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\n", r.stage, r.count));
        }
        out
    }

    /// `{"labels": [...], "counts": [...]}` for a bar chart.
    pub fn bar_chart(&self) -> serde_json::Value {
        serde_json::json!({
            "labels": self.rows.iter().map(|r| r.stage.as_str()).collect::<Vec<_>>(),
            "counts": self.rows.iter().map(|r| r.count).collect::<Vec<_>>(),
        })
    }
}

/// Reads the funnel from either a dataset manifest or a stage file.
pub fn read_funnel(path: &Path) -> Result<FunnelStats> {
    match read_manifest(path) {
        Ok(m) => Ok(m.funnel),
        Err(first) => read_work(path).map(|w| w.funnel).map_err(|_| first),
    }
}
