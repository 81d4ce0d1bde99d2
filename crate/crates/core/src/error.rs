use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsegError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset not found at {0}")]
    DatasetNotFound(PathBuf),
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("label out of range in {file}: value {value} with {classes} classes")]
    LabelRange {
        file: PathBuf,
        value: u8,
        classes: usize,
    },
    #[error("cannot decode {file}: {message}")]
    Decode { file: PathBuf, message: String },
    #[error("channel {channel} has zero variance; cannot normalize by it")]
    ZeroVariance { channel: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("fusion shape mismatch: {0}")]
    FusionShape(String),
    #[error("metric shape mismatch: {0}")]
    MetricShape(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),
    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },
    #[error("checkpoint holds {found}, requested {expected}")]
    Incompatible { expected: String, found: String },
    #[error("pretrained weights unavailable: {0}")]
    PretrainedUnavailable(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("inconsistent table input: {0}")]
    TableConsistency(String),
    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<EnsegError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] enseg_tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EnsegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EnsegError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            EnsegError::Config(_) => "E_CONFIG",
            EnsegError::DatasetNotFound(_) => "E_DATASET_NOT_FOUND",
            EnsegError::Layout(_) => "E_DATASET_LAYOUT",
            EnsegError::Pairing(_) => "E_PAIRING",
            EnsegError::LabelRange { .. } => "E_LABEL_RANGE",
            EnsegError::Decode { .. } => "E_DECODE",
            EnsegError::ZeroVariance { .. } => "E_ZERO_VARIANCE",
            EnsegError::EmptyDataset(_) => "E_EMPTY_DATASET",
            EnsegError::Shape(_) => "E_SHAPE",
            EnsegError::FusionShape(_) => "E_FUSION_SHAPE",
            EnsegError::MetricShape(_) => "E_METRIC_SHAPE",
            EnsegError::CheckpointNotFound(_) => "E_CHECKPOINT_NOT_FOUND",
            EnsegError::CorruptCheckpoint { .. } => "E_CHECKPOINT_CORRUPT",
            EnsegError::Incompatible { .. } => "E_CHECKPOINT_INCOMPATIBLE",
            EnsegError::PretrainedUnavailable(_) => "E_PRETRAINED_UNAVAILABLE",
            EnsegError::Divergence { .. } => "E_DIVERGENCE",
            EnsegError::TableConsistency(_) => "E_TABLE",
            EnsegError::Member { source, .. } => source.code(),
            EnsegError::Io { .. } => "E_IO",
            EnsegError::Tensor(_) => "E_TENSOR",
            EnsegError::Json(_) => "E_JSON",
        }
    }

    /// True for problems with the caller's input (config, files, shapes), as
    /// opposed to failures while running.
    pub fn is_input_error(&self) -> bool {
        match self {
            EnsegError::Divergence { .. } | EnsegError::Io { .. } | EnsegError::Tensor(_) => false,
            EnsegError::Member { source, .. } => source.is_input_error(),
            _ => true,
        }
    }

    pub(crate) fn in_member(self, index: usize) -> Self {
        EnsegError::Member {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = EnsegError> = std::result::Result<T, E>;
