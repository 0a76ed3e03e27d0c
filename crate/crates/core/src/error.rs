//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch of size 1 cannot be mixed")]
    BatchTooSmall,
    #[error("cost cap exceeded: {need} > {cap} {what}")]
    CapExceeded { what: &'static str, need: usize, cap: usize },
    #[error("zero-norm probe vector")]
    ZeroNormVector,
    #[error("bad magic: expected 0x{expected:08x}, got 0x{got:08x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated payload in {0}")]
    TruncatedPayload(String),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("noise mask has no {0} examples")]
    MaskDegenerate(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("malformed metrics file {path}: {detail}")]
    MalformedCsv { path: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
