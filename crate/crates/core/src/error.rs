use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite router logit for expert {expert}")]
    NonFiniteLogit { expert: usize },

    #[error("finite-difference oracle failed: non-finite evaluation at coordinate {coordinate}")]
    OracleFailure { coordinate: usize },

    #[error("cannot select {k} experts out of {n}")]
    TooManySelected { k: usize, n: usize },

    #[error("selected experts carry zero probability mass")]
    ZeroGateMass,

    #[error("non-finite importance ratio at response {response}, token {token}")]
    NonFiniteRatio { response: usize, token: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("no trace entry for token {token}, layer {layer}")]
    MissingTraceEntry { token: usize, layer: usize },

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Failures while decoding the binary trace and checkpoint formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("stream truncated: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("malformed payload: {0}")]
    Invalid(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
