use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not row-stochastic: {0}")]
    NotStochastic(String),

    #[error("matrix is singular")]
    Singular,

    #[error("enumeration over {units} binary units exceeds the limit of {limit}")]
    EnumerationLimit { units: usize, limit: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("no persistent chains for instance {0}")]
    UnknownChain(u64),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch (expected {expected}, found {found})")]
    Checksum { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dims(what, expected, got))
    }
}
