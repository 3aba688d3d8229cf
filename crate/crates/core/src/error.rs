use std::io;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero dimension in shape {0:?}")]
    ZeroDimension(Vec<usize>),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("bad magic: expected \"CSGT\", found {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file {what}: {value}")]
    Unsupported { what: &'static str, value: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension overflow: {0:?} does not fit in memory")]
    DimensionOverflow(Vec<u32>),

    #[error("generator is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("target {target_db} dB unreachable: mean PSNR* at tau = 0 is {achieved_db} dB")]
    TargetUnreachable { target_db: f64, achieved_db: f64 },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("target is not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("degenerate dataset: inputs {first} and {second} coincide but carry different labels")]
    DegenerateDataset { first: usize, second: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that stem from arithmetic rather than malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::TargetUnreachable { .. } | Error::RankDeficient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
