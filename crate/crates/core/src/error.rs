use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("malformed tensor file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(
        "unsupported Hadamard order {n}: need n = p*q with p a power of two and q in {supported:?}"
    )]
    UnsupportedOrder {
        n: usize,
        supported: &'static [usize],
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for failures of input files rather than of the computation.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format { .. } | Error::Json(_))
    }
}
