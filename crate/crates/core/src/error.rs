use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by model construction, training, I/O, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("EM failure in component {component}: {reason}")]
    EmFailure { component: usize, reason: String },

    #[error("parse error at row {row}, column {col}: {reason}")]
    Parse {
        row: usize,
        col: usize,
        reason: String,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("preprocessing mismatch: model expects {model}, data carries {data}")]
    PreprocessingMismatch { model: String, data: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
