use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-increasing times at line {line}")]
    NonIncreasingTimes { line: usize },

    #[error("line {line}: mark {mark} out of range for {num_types} types")]
    MarkOutOfRange { line: usize, mark: usize, num_types: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-stationary Hawkes parameters: spectral radius {0:.4} >= 1")]
    NonStationary(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward called on a node without a recorded graph")]
    NoGraph,

    #[error("parameter name mismatch: {0}")]
    NameMismatch(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::NonIncreasingTimes { .. } => "non_increasing_times",
            Error::MarkOutOfRange { .. } => "mark_out_of_range",
            Error::InvalidSequence(_) => "invalid_sequence",
            Error::Precondition(_) => "precondition",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonStationary(_) => "non_stationary",
            Error::Shape(_) => "shape",
            Error::NoGraph => "no_graph",
            Error::NameMismatch(_) => "name_mismatch",
            Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyBatch(_) => "empty_batch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
