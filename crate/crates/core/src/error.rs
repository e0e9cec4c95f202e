use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by tensor kernels, the autograd tape and the model layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{op}: non-finite value in output (checked mode)")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("graph already released by a previous backward pass")]
    GraphReleased,

    #[error("{unit}: fused weights missing, call fuse first")]
    NotFused { unit: String },

    #[error("{unit}: cannot fuse while in training mode")]
    FuseWhileTraining { unit: String },

    #[error("level {level}: lane `{lane}` expects spatial {expected:?}, got {got:?}")]
    Spatial {
        level: String,
        lane: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("input {h}x{w} is not divisible by {multiple}")]
    InputNotDivisible { h: usize, w: usize, multiple: usize },

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error(transparent)]
    Weights(#[from] WeightError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid config JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Failures while parsing or applying a weight file.
#[derive(Debug, Error)]
pub enum WeightError {
    #[error("bad magic {found:?}, expected \"MAFW\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("unknown dtype code {code} in entry `{name}` (format version {version})")]
    UnknownDtype { code: u8, name: String, version: u32 },

    #[error("entry name at offset {offset} is not valid UTF-8")]
    BadName { offset: usize },

    #[error("entry `{0}` is not present in the model")]
    UnexpectedEntry(String),

    #[error("model parameter `{0}` missing from the file")]
    MissingEntry(String),

    #[error("entry `{name}` has dims {found:?}, model expects {expected:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}
