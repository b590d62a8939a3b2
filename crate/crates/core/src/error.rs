use thiserror::Error;

/// Crate-wide error type. File-format problems get distinct variants so
/// callers (and the C ABI) can tell them apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("bad magic bytes: {0}")]
    MagicMismatch(String),
    #[error("unsupported format version {version}: {context}")]
    VersionMismatch { version: u8, context: String },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("frozen parameter modified: {0}")]
    FrozenViolation(String),
    #[error("missing parameter: {0}")]
    MissingParam(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
