use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("token id {id} at position {position} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        vocab_size: usize,
    },

    #[error("{op} requires a {expected} model")]
    AttentionMode {
        op: &'static str,
        expected: &'static str,
    },

    #[error("mask pattern has no masked positions")]
    EmptyMask,

    #[error("{what} of size {n} exceeds the enumeration limit {limit}")]
    EnumerationLimit {
        what: &'static str,
        n: usize,
        limit: usize,
    },

    #[error("invalid masking prior: {0}")]
    InvalidPrior(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid generation request: {0}")]
    InvalidGeneration(String),

    #[error("invalid sampler: {0}")]
    InvalidSampler(String),

    #[error("every candidate token is excluded")]
    NoCandidates,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("{0}")]
    UnsupportedMode(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
