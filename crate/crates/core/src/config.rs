//! Pipeline configuration: one TOML file with a section per stage.
//!
//! The digest covers only settings that change stage outputs; worker
//! counts, service endpoints and input locations are left out so a run can
//! be resumed on another machine.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::{make_remote_backends, make_stub_backends, BackendSet, RemoteConfig};
use crate::backends::stub::{make_stub_backends_with_dim, DEFAULT_STUB_DIMENSION};
use crate::error::{Error, Result};
use crate::evaluation::{default_image_scales, DEFAULT_CMMD_BANDWIDTH, DEFAULT_CMMD_SCALE, DEFAULT_SWEEP_TEXT_SCALE};
use crate::guidance::{DropoutConfig, SamplerSettings, TrainHyperparams};
use crate::post_removal::PostRemovalConfig;
use crate::pre_removal::GeometryConfig;
use crate::removal::RemovalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub kind: BackendKind,
    pub stub_dimension: usize,
    pub remote: Option<RemoteConfig>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            kind: BackendKind::Stub,
            stub_dimension: DEFAULT_STUB_DIMENSION,
            remote: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub source_tag: String,
    pub dedup_iou: Option<f64>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            annotations: None,
            images: None,
            source_tag: "coco".into(),
            dedup_iou: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionConfig {
    pub class_template: bool,
    pub vlm_llm: bool,
    pub reference: bool,
    pub location_probability: f64,
    pub icl_bank: Option<PathBuf>,
    /// RefCOCO-style referring expressions.
    pub references: Option<PathBuf>,
}

impl Default for InstructionConfig {
    fn default() -> Self {
        InstructionConfig {
            class_template: true,
            vlm_llm: true,
            reference: true,
            location_probability: 0.25,
            icl_bank: None,
            references: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub metrics: Vec<String>,
    pub bandwidth: f64,
    pub scale: f64,
    pub s_text: f64,
    pub s_image_values: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            metrics: ["l1", "l2", "clip-i", "dino", "clip-t", "cmmd"].map(String::from).to_vec(),
            bandwidth: DEFAULT_CMMD_BANDWIDTH,
            scale: DEFAULT_CMMD_SCALE,
            s_text: DEFAULT_SWEEP_TEXT_SCALE,
            s_image_values: default_image_scales(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub dropout: DropoutConfig,
    pub hyperparams: TrainHyperparams,
    pub sampler: SamplerSettings,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            dropout: DropoutConfig::default(),
            hyperparams: TrainHyperparams::full_scale(),
            sampler: SamplerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub epsilon: f64,
    pub sample_size: usize,
    pub stratify: bool,
    pub annotations_log: Option<PathBuf>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            epsilon: 0.05,
            sample_size: 500,
            stratify: false,
            annotations_log: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,
    pub backends: BackendsConfig,
    pub ingest: IngestConfig,
    pub pre_removal: GeometryConfig,
    pub removal: RemovalConfig,
    pub post_removal: PostRemovalConfig,
    pub instructions: InstructionConfig,
    pub evaluation: EvaluationConfig,
    pub guidance: GuidanceConfig,
    pub calibration: CalibrationConfig,
}

fn file_digest(path: &Option<PathBuf>) -> Result<Option<String>> {
    path.as_ref()
        .map(|p| std::fs::read(p).map(|b| crate::raster::sha256_hex(&b)).map_err(|e| Error::io(p, e)))
        .transpose()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::manifest::read_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.pre_removal;
        if !(0.0..=1.0).contains(&g.min_area_frac) || g.min_area_frac > g.max_area_frac || g.max_area_frac > 1.0 {
            return Err(Error::Config("pre_removal area fractions must satisfy 0 <= min <= max <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.instructions.location_probability) {
            return Err(Error::Config("instructions.location_probability must be in [0, 1]".into()));
        }
        if self.removal.n_candidates < 2 {
            return Err(Error::Config("removal.n_candidates must be at least 2 for consensus".into()));
        }
        if self.backends.kind == BackendKind::Remote && self.backends.remote.is_none() {
            return Err(Error::Config("backends.kind = remote needs a [backends.remote] section".into()));
        }
        self.guidance.dropout.validate()?;
        Ok(())
    }

    /// Settings that change stage outputs, as canonical JSON.
    pub fn digest_view(&self) -> Result<serde_json::Value> {
        let backends = match self.backends.kind {
            BackendKind::Stub => json!({ "kind": "stub", "stub_dimension": self.backends.stub_dimension }),
            BackendKind::Remote => json!({ "kind": "remote" }),
        };
        Ok(json!({
            "seed": self.seed,
            "backends": backends,
            "ingest": { "source_tag": self.ingest.source_tag, "dedup_iou": self.ingest.dedup_iou },
            "pre_removal": self.pre_removal,
            "removal": self.removal,
            "post_removal": self.post_removal,
            "instructions": {
                "class_template": self.instructions.class_template,
                "vlm_llm": self.instructions.vlm_llm,
                "reference": self.instructions.reference,
                "location_probability": self.instructions.location_probability,
                "icl_bank_sha256": file_digest(&self.instructions.icl_bank)?,
                "references_sha256": file_digest(&self.instructions.references)?,
            },
        }))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(crate::raster::sha256_hex(serde_json::to_string(&self.digest_view()?)?.as_bytes()))
    }

    pub fn make_backends(&self) -> Result<BackendSet> {
        match self.backends.kind {
            BackendKind::Stub if self.backends.stub_dimension == DEFAULT_STUB_DIMENSION => Ok(make_stub_backends(self.seed)),
            BackendKind::Stub => Ok(make_stub_backends_with_dim(self.seed, self.backends.stub_dimension)),
            BackendKind::Remote => {
                let remote = self
                    .backends
                    .remote
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [backends.remote]".into()))?;
                make_remote_backends(remote)
            }
        }
    }
}

/// Recursively overlays `fragment` onto `base`. Applying the same fragment
/// twice leaves `base` unchanged the second time.
pub fn merge_fragment(base: &mut toml::Table, fragment: &toml::Table) {
    for (k, v) in fragment {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(f)) => merge_fragment(b, f),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Merges `fragment` into the config file at `path` (created if missing),
/// checking the result still parses. Returns the merged table.
pub fn merge_into_file(path: &Path, fragment: &toml::Table) -> Result<toml::Table> {
    let mut base: toml::Table = if path.exists() {
        toml::from_str(&crate::manifest::read_text(path)?).map_err(|e| Error::Config(e.to_string()))?
    } else {
        toml::Table::new()
    };
    merge_fragment(&mut base, fragment);
    let text = toml::to_string(&base).map_err(|e| Error::Config(e.to_string()))?;
    PipelineConfig::from_toml(&text)?;
    crate::manifest::write_atomic(path, text.as_bytes())?;
    Ok(base)
}
