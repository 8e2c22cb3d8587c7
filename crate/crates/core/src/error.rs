use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds max-seq-len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("estimator: {0}")]
    Estimator(String),

    #[error("regularizer: {0}")]
    Regularizer(String),

    #[error("training: {0}")]
    Training(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

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
    /// Process exit status: 2 for configuration, 3 for input data and
    /// checkpoints, 4 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ModelConfig(_) => 2,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::OutOfVocab { .. }
            | Error::SequenceTooLong { .. }
            | Error::Checkpoint(_) => 3,
            _ => 4,
        }
    }

    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(" vs ");
        Error::Shape { op, shapes }
    }
}
