use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid pruning scheme: {0}")]
    Scheme(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed BCS matrix ({array}): {reason}")]
    Bcs { array: &'static str, reason: String },
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("archive is missing tensor blob `{0}`")]
    MissingBlob(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("latency table: {0}")]
    Latency(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
