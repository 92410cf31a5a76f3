use thiserror::Error;

pub type Result<T, E = TernError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TernError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("backward: {0}")]
    Backward(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },

    #[error("corrupt ternary code 0b10 at index {index}")]
    CorruptCode { index: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("parse error at offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TernError {
    /// Stable machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            TernError::Dimension { .. } | TernError::Shape { .. } => "shape",
            TernError::NonFinite { .. } | TernError::Divergence { .. } => "numeric",
            TernError::Config(_) | TernError::Empty(_) | TernError::Layer { .. } => "config",
            TernError::Backward(_) => "autodiff",
            TernError::CorruptCode { .. }
            | TernError::BadMagic { .. }
            | TernError::Version { .. }
            | TernError::Checksum { .. }
            | TernError::Truncated { .. }
            | TernError::Parse { .. } => "format",
            TernError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TernError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TernError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
