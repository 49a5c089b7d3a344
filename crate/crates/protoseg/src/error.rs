use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by the failing subsystem so
/// callers (notably the CLI) can distinguish bad input from runtime faults.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {class} has no feature vectors")]
    EmptyClass { class: usize },

    #[error("no labeled pixels available for cross-entropy")]
    NoLabeledPixels,

    #[error("zero-norm vector in cosine distance (set {set}, slot {slot})")]
    ZeroNormVector { set: &'static str, slot: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("empty query set: every image is used as support")]
    EmptyQuerySet,

    #[error("unknown image id {id}")]
    UnknownId { id: String },

    #[error("dataset error at {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    ImageCodec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn dataset(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Dataset { path: path.into(), detail: detail.into() }
    }
}
