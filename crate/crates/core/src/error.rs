use thiserror::Error;

#[derive(Debug, Error)]
pub enum OnnError {
    #[error("empty pool window")]
    EmptyPool,

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("operator set index {0} outside 0..27")]
    BadSetIndex(usize),

    #[error("empty id list for {0}")]
    EmptyIdList(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("operator set {set} is not in the active sub-library")]
    NotInSubLibrary { set: usize },

    #[error("layer {0} is not an assignable hidden layer")]
    NotAssignable(usize),

    #[error("divergence: non-finite gradient")]
    NonFiniteGradient,

    #[error("divergence at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("degenerate range")]
    DegenerateRange,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("image format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OnnError>;
