use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// [`Error::exit_code`] maps variants onto the CLI's exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("feature count mismatch: expected {expected}, found {found}")]
    FeatureCountMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dangling image_id {0:?}")]
    DanglingImageId(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid caption: {0}")]
    InvalidCaption(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("divergence: non-finite gradient")]
    NonFiniteGradient,
    #[error("divergence at step {step}")]
    Divergence { step: u64 },
    #[error("gradient check failed: max relative error {error:.3e} >= {tolerance:.1e}")]
    GradientCheck { error: f64, tolerance: f64 },
    #[error("experiment cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// 1 usage error, 2 data/format error, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFiniteGradient | Error::Divergence { .. } | Error::GradientCheck { .. } => 3,
            Error::Cell { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
