use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt input: {0}")]
    CorruptInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SeqLen { len: usize, max: usize },

    #[error("token id {id} out of range for vocab size {vocab}")]
    Vocab { id: usize, vocab: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("rendering has no target positions in its loss mask")]
    NoTarget,

    #[error("masked position count mismatch: direct {direct}, copy {copy}")]
    Alignment { direct: usize, copy: usize },

    #[error("no data: {0}")]
    NoData(String),

    #[error("non-finite loss at step {step} (lr {lr}, batch {batch:?})")]
    NonFiniteLoss { step: usize, lr: f64, batch: Vec<usize> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pivot translation produced an empty intermediate")]
    EmptyPivot,

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Json(_) | Error::State(_) => 2,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }
}
