//! Object-addition dataset construction: mask screening, object removal by
//! inpainting, removal verification, instruction generation, dual-condition
//! guidance and evaluation metrics, with pluggable model backends.

pub mod backends;
pub mod blob;
pub mod calibration;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod http;
pub mod ingest;
pub mod instructions;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod post_removal;
pub mod pre_removal;
pub mod raster;
pub mod removal;
pub mod seed;
pub mod synth;

pub use backends::BackendSet;
pub use blob::{BlobRef, BlobStore, LocalBlobStore};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use model::{
    DatasetManifest, EditPairRecord, EmbeddingVector, FunnelStage, FunnelStats, Gate, ImageRecord, Instruction,
    InstructionKind, LocationCell, ManifestEntry, MaskAnnotation, RemovalCandidate, Scores, StageFlag,
};
pub use pipeline::{run_all, run_stage, RunOptions, Stage, Workspace};
pub use raster::{Mask, Rgb};
