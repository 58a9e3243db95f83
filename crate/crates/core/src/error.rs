use std::path::PathBuf;

/// Errors produced anywhere in the extraction, graph, training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown task `{0}` (expected one of: nli, comve, ecqa)")]
    UnknownTask(String),

    #[error("record {id}: label `{label}` is not in the label set of task {task}")]
    UnknownLabel {
        id: String,
        label: String,
        task: String,
    },

    #[error("instance {id}: {message}")]
    InvalidInstance { id: String, message: String },

    #[error("invalid attention snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed graph payload: {0}")]
    MalformedGraph(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no explanation graph for instance `{0}`")]
    MissingGraph(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (instances: {ids})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
