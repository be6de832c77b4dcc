//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("cross-entropy over an empty mask is undefined")]
    EmptyMask,
    #[error("target id {id} out of range (vocab {vocab})")]
    TargetOutOfRange { id: usize, vocab: usize },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown token id {id} at position {pos}")]
    UnknownId { id: u32, pos: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("trunk depth {trunk} does not match requested M+N = {want}")]
    DepthMismatch { trunk: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("k = {k} must satisfy 1 <= k < B = {b}")]
    BadK { k: usize, b: usize },
    #[error("feature sets disagree: {0}")]
    Mismatch(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing stage `{0}`")]
    MissingStage(String),
    #[error("missing key `{key}` in stage `{stage}`")]
    MissingKey { stage: String, key: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a UFRK checkpoint)")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("truncated checkpoint")]
    Truncated,
}
