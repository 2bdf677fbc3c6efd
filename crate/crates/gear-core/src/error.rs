//! Error type shared across the pipeline.

/// Errors produced by corpus loading, prompting, generation, embedding,
/// search, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("split ratios must sum to 1.0, got {0}")]
    InvalidRatios(f64),

    #[error("corpus too small: need {need} entries, have {have}")]
    CorpusTooSmall { need: usize, have: usize },

    #[error("prompt error: {0}")]
    Prompt(String),

    /// The response contained no usable candidate list. Callers may retry.
    #[error("no parsable candidate list: {0}")]
    ParseFailure(String),

    #[error("generation failed for definition {definition:?}: {reason}")]
    Generation { definition: String, reason: String },

    #[error("embedding provider error: {0}")]
    Embedding(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero vector for {0:?}")]
    ZeroVector(String),

    #[error("corrupt cache: {0}")]
    CorruptCache(String),

    /// No gold term of the query is present in the vocabulary. Counted and
    /// excluded from rank metrics rather than aborting the run.
    #[error("no gold term in vocabulary for definition {0:?}")]
    MissingGold(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
