use std::path::PathBuf;

use crate::oracle::OracleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to load image for {image_id}: {reason}")]
    ImageLoad { image_id: String, reason: String },

    #[error("corrupt manifest entry at {path}:{line}: {reason}")]
    CorruptManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("manifest is empty")]
    RejectedEmptyManifest,

    #[error("invalid class map for {image_id}: {reason}")]
    InvalidClassMap { image_id: String, reason: String },

    #[error("oracle failure ({context}): {source}")]
    Oracle {
        context: String,
        #[source]
        source: OracleError,
    },

    #[error("embedding spaces are not comparable: {left} vs {right}")]
    SpaceMismatch { left: String, right: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("no error patches to index for class {class}")]
    EmptyErrorSet { class: String },

    #[error("query id {0} is not in the index")]
    UnknownQueryId(String),

    #[error("neighborhood is empty")]
    EmptyNeighborhood,

    #[error("error set for class {class} has a single patch; no neighborhood exists")]
    SingletonErrorSet { class: String },

    #[error("no ground truth available for patch {patch_id}")]
    MissingGroundTruth { patch_id: String },

    #[error("confusion counts are all zero")]
    EmptyCounts,

    #[error("duplicate verdict from {evaluator_id} on {patch_id}")]
    DuplicateVerdict {
        patch_id: String,
        evaluator_id: String,
    },

    #[error("invalid verdict record: {0}")]
    InvalidVerdict(String),

    #[error("predicted systematic patch {patch_id} has no aggregated verdict")]
    UncoveredPrediction { patch_id: String },

    #[error("stage {stage} requires {missing} to be done first")]
    StageDependencyMissing { stage: String, missing: String },

    #[error("run directory {0} holds a different config; refusing to resume")]
    ConfigMismatch(PathBuf),

    #[error("run directory {0} is locked by another process")]
    RunLocked(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("packed matrix {path}: {reason}")]
    PackedFormat { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn oracle(context: impl Into<String>, source: OracleError) -> Self {
        Error::Oracle {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 oracle, 4 dependency.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::RunLocked(_) => 2,
            Error::RejectedEmptyManifest | Error::CorruptManifest { .. } => 2,
            Error::Oracle { .. } => 3,
            Error::StageDependencyMissing { .. } => 4,
            _ => 1,
        }
    }
}
