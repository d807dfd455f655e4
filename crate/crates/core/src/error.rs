use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: empty output (length {len} with padding {padding} is shorter than kernel {kernel})")]
    EmptyOutput {
        op: &'static str,
        len: usize,
        padding: usize,
        kernel: usize,
    },

    #[error("no transposed-convolution padding maps length {from} to {to} (stride {stride}, kernel {kernel})")]
    LengthMismatch {
        from: usize,
        to: usize,
        stride: usize,
        kernel: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad inputs or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Diverged { .. } | Error::Io(_) | Error::NonFinite(_))
    }
}
