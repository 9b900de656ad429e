use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("funnel is not monotone: stage '{stage}' has {count} > previous {previous}")]
    FunnelNotMonotone {
        stage: String,
        count: u64,
        previous: u64,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("mask region is empty")]
    EmptyRegion,

    #[error("direction undefined: {0} difference vector is zero")]
    UndefinedDirection(&'static str),

    #[error("backend '{service}' unavailable: {message}")]
    BackendUnavailable { service: String, message: String },

    #[error("backend '{service}' violated its protocol: {message}")]
    BackendProtocol { service: String, message: String },

    #[error("instruction generation failed at stage '{stage}': {message}")]
    InstructionGeneration { stage: &'static str, message: String },

    #[error("stage order violation: expected '{expected}' before '{requested}'")]
    StageOrder { expected: String, requested: String },

    #[error("config digest changed mid-pipeline (manifest {manifest}, current {current}); start a fresh run or pass --force")]
    ConfigDigestMismatch { manifest: String, current: String },

    #[error("unknown candidate {pair_id}#{candidate_index}")]
    UnknownCandidate {
        pair_id: String,
        candidate_index: u32,
    },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
