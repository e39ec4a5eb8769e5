use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProcapError {
    #[error("homography is not invertible (|det| = {0:e})")]
    NonInvertibleHomography(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec failure on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),
    #[error("mask {path} is not binary (found value {value})")]
    MaskNotBinary { path: PathBuf, value: f64 },
    #[error("knowledge base build needs at least one reference")]
    EmptyRefs,
    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,
    #[error("knowledge base key {index} ({name:?}) has norm {norm}, expected 1")]
    NormViolation { index: usize, name: String, norm: f64 },
    #[error("checkpoint load failure: {0}")]
    CheckpointLoadFailure(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token sequence needs at least <bos> and <eos>")]
    EmptySequence,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("evaluation split is empty")]
    EmptyEvalSplit,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = ProcapError> = std::result::Result<T, E>;

impl ProcapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
