use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite loss when perturbing parameter `{param}` at index {index}")]
    NonFiniteGrad { param: String, index: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("infeasible alignment: {frames} frames cannot emit {needed} labels")]
    InfeasibleAlignment { frames: usize, needed: usize },

    #[error("utterance too short: {0} frames (need at least 4)")]
    UtteranceTooShort(usize),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("rank not low: rank {rank} must be below min({d_in}, {d_out})")]
    RankNotLow {
        rank: usize,
        d_in: usize,
        d_out: usize,
    },

    #[error("empty MLM batch")]
    EmptyMlmBatch,

    #[error("empty reference")]
    EmptyReference,

    #[error("missing LM checkpoint: {0}")]
    MissingLm(String),

    #[error("numeral {0} outside the supported range 0-99")]
    NumeralOutOfRange(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
