//! Dual-condition guidance: condition dropout for training, the score
//! combination used at sampling time, and the training record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod sampler;
pub mod toy;

pub use sampler::{edit_latent, multi_edit_latent_chain, CountingCodec, LatentCodec, NoiseSchedule, SamplingSchedule, StubCodec};

/// A noisy latent `z_t` at schedule index `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub t: usize,
}

impl LatentState {
    pub fn new(values: Vec<f64>, shape: Vec<usize>, t: usize) -> Self {
        LatentState { values, shape, t }
    }

    pub fn with_values(&self, values: Vec<f64>, t: usize) -> Self {
        LatentState {
            values,
            shape: self.shape.clone(),
            t,
        }
    }
}

/// Text and image conditions; `None` is the null condition, not a zero vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditioningPair {
    pub c_text: Option<Vec<f64>>,
    pub c_image: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub s_text: f64,
    pub s_image: f64,
}

impl GuidanceScales {
    pub fn new(s_text: f64, s_image: f64) -> Result<Self> {
        for (name, v) in [("s_text", s_text), ("s_image", s_image)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Precondition(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(GuidanceScales { s_text, s_image })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutConfig {
    pub p_text_only: f64,
    pub p_image_only: f64,
    pub p_both: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            p_text_only: 0.05,
            p_image_only: 0.05,
            p_both: 0.05,
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_text_only, self.p_image_only, self.p_both];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 {
            return Err(Error::Config(format!("invalid dropout probabilities {ps:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropEvent {
    Keep,
    Text,
    Image,
    Both,
}

/// Maps one uniform draw onto the three disjoint drop events.
pub fn drop_event(cfg: &DropoutConfig, u: f64) -> DropEvent {
    let a = cfg.p_text_only;
    let b = a + cfg.p_image_only;
    let c = b + cfg.p_both;
    if u < a {
        DropEvent::Text
    } else if u < b {
        DropEvent::Image
    } else if u < c {
        DropEvent::Both
    } else {
        DropEvent::Keep
    }
}

pub fn dropout_conditions(pair: ConditioningPair, cfg: &DropoutConfig, u: f64) -> ConditioningPair {
    match drop_event(cfg, u) {
        DropEvent::Keep => pair,
        DropEvent::Text => ConditioningPair { c_text: None, ..pair },
        DropEvent::Image => ConditioningPair { c_image: None, ..pair },
        DropEvent::Both => ConditioningPair::default(),
    }
}

/// `e_u + s_I(e_img − e_u) + s_T(e_full − e_img)`, evaluated in the
/// rearranged form `(1−s_I)e_u + (s_I−s_T)e_img + s_T·e_full` so the
/// identities at `(1,1)` and `(0,1)` hold exactly.
pub fn cfg_combine(e_uncond: &[f64], e_img: &[f64], e_full: &[f64], scales: GuidanceScales) -> Result<Vec<f64>> {
    if e_img.len() != e_uncond.len() {
        return Err(Error::dims(e_uncond.len(), e_img.len()));
    }
    if e_full.len() != e_uncond.len() {
        return Err(Error::dims(e_uncond.len(), e_full.len()));
    }
    let (s_i, s_t) = (scales.s_image, scales.s_text);
    let (wu, wi, wf) = (1.0 - s_i, s_i - s_t, s_t);
    Ok(e_uncond
        .iter()
        .zip(e_img)
        .zip(e_full)
        .map(|((u, i), f)| wu * u + wi * i + wf * f)
        .collect())
}

/// Training settings handed to an external trainer (and, scaled down, the toy one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyperparams {
    pub lr: f64,
    pub epochs: u32,
    pub per_worker_batch: u32,
    pub workers: u32,
    pub grad_accum: u32,
    pub resolution: u32,
    pub effective_batch: u32,
    pub max_grad_norm: f64,
    pub finetune_lr: f64,
    pub finetune_epochs: u32,
    pub finetune_batch: u32,
}

impl TrainHyperparams {
    pub fn full_scale() -> Self {
        TrainHyperparams {
            lr: 5e-5,
            epochs: 60,
            per_worker_batch: 128,
            workers: 8,
            grad_accum: 4,
            resolution: 256,
            effective_batch: 4096,
            max_grad_norm: 1.0,
            finetune_lr: 1e-6,
            finetune_epochs: 250,
            finetune_batch: 8,
        }
    }

    /// Small settings for the toy harness.
    pub fn toy() -> Self {
        TrainHyperparams {
            lr: 2e-3,
            epochs: 40,
            per_worker_batch: 64,
            workers: 1,
            grad_accum: 2,
            resolution: 2,
            effective_batch: 128,
            max_grad_norm: 1.0,
            finetune_lr: 0.0,
            finetune_epochs: 0,
            finetune_batch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let product = self.per_worker_batch as u64 * self.workers as u64 * self.grad_accum as u64;
        if product != self.effective_batch as u64 {
            return Err(Error::Config(format!(
                "effective_batch {} != per_worker_batch {} x workers {} x grad_accum {}",
                self.effective_batch, self.per_worker_batch, self.workers, self.grad_accum
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// What an external trainer needs: where the data is and how to train on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub dataset: String,
    pub config_digest: String,
    pub dropout: DropoutConfig,
    pub hyperparams: TrainHyperparams,
    pub sampler: SamplerSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub s_text: f64,
    pub s_image: f64,
    pub steps: u32,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            s_text: 7.5,
            s_image: 1.5,
            steps: 50,
            seed: 0,
        }
    }
}
