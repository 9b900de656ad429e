//! Pluggable model interfaces.
//!
//! Every stage talks to models only through these traits. [`stub`] provides
//! deterministic, offline implementations; [`remote`] speaks the project's
//! HTTP protocol (see [`wire`]) to external inference services, and
//! [`service`] serves any backend set over that same protocol.

pub mod remote;
pub mod service;
pub mod stub;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::guidance::LatentState;
use crate::model::EmbeddingVector;
use crate::raster::{Mask, Rgb};

pub use remote::{make_remote_backends, RemoteConfig, ServiceConfig};
pub use stub::make_stub_backends;

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_image(&self, image: &Rgb) -> Result<EmbeddingVector>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
}

#[derive(Debug, Clone, Copy)]
pub struct InpaintRequest<'a> {
    pub image: &'a Rgb,
    pub mask: &'a Mask,
    pub positive_prompt: &'a str,
    pub negative_prompt: &'a str,
    pub steps: u32,
    pub seed: u64,
}

pub trait Inpainter: Send + Sync {
    fn name(&self) -> &str;
    /// Output has the input's dimensions; same request and seed give the same output.
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Rgb>;
}

pub trait Captioner: Send + Sync {
    fn name(&self) -> &str;
    fn describe(&self, image: &Rgb, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

/// Alternating turns ending on a user turn; the writer fills the next assistant turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub turns: Vec<ChatTurn>,
}

pub trait InstructionWriter: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, transcript: &ChatTranscript) -> Result<String>;
}

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    /// Noise estimate with the latent's shape. `None` means the condition is dropped.
    fn score(&self, latent: &LatentState, text: Option<&[f64]>, image: Option<&[f64]>) -> Result<Vec<f64>>;
}

/// The full set of handles a pipeline run needs.
#[derive(Clone)]
pub struct BackendSet {
    pub embedder: Arc<dyn Embedder>,
    /// Second image embedder for the DINO-style similarity metric.
    pub dino: Arc<dyn Embedder>,
    pub inpainter: Arc<dyn Inpainter>,
    pub captioner: Arc<dyn Captioner>,
    pub writer: Arc<dyn InstructionWriter>,
    pub denoiser: Arc<dyn Denoiser>,
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSet")
            .field("embedder", &self.embedder.name())
            .field("dino", &self.dino.name())
            .field("inpainter", &self.inpainter.name())
            .field("captioner", &self.captioner.name())
            .field("writer", &self.writer.name())
            .field("denoiser", &self.denoiser.name())
            .finish()
    }
}
