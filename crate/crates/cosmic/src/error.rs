//! Crate-wide error type.
//!
//! One enum covers the whole pipeline; the CLI maps variant classes to its
//! stable exit codes (1 I/O, 2 config, 3 training abort, 4 missing artifact).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lexicon error: unknown token `{0}`")]
    UnknownToken(String),

    #[error("grammar error: {0}")]
    Grammar(String),

    #[error("tokenizer error: out-of-vocabulary token `{0}`")]
    OutOfVocab(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("infeasible CTC alignment: {frames} frames < {required} required")]
    CtcInfeasible { frames: usize, required: usize },

    #[error("context length {needed} exceeds limit {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("generation truncated by context limit after `{partial}`")]
    GenerationTruncated { partial: String },

    #[error("reference error: {0}")]
    Reference(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Wav(_) => 1,
            Error::TrainAbort(_) | Error::NonFinite(_) => 3,
            Error::MissingArtifact(_) | Error::Reference(_) | Error::UnknownToken(_) => 4,
            _ => 2,
        }
    }
}
