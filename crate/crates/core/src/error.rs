use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("function is not deterministic: two evaluations differ ({0} vs {1})")]
    NonDeterministic(f64, f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {id} out of range for table of {size} rows")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
