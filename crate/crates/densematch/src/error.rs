use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Array extents do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (bad key, bad plan, bad CLI combination).
    #[error("configuration error: {0}")]
    Config(String),

    /// An internal contract between modules was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf appeared in a computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file content.
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    /// Synthetic data generation could not produce a valid sample.
    #[error("generation error: {0}")]
    Generation(String),

    /// Evaluation over an empty or degenerate set.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable process exit code for scripting.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Format { .. } | Error::Io(_) | Error::Generation(_) => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
