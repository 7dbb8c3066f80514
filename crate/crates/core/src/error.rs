use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument, {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward called on a consumed trace")]
    TraceConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batchnorm: empty batch in train mode")]
    EmptyBatch,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown variant {0:?} (expected T, S, M, L or micro)")]
    UnknownVariant(String),

    #[error("cannot fold batchnorm in a train-mode graph")]
    TrainModeFold,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "argument",
            Error::NonFinite { .. } => "nonfinite",
            Error::TraceConsumed => "trace-consumed",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::EmptyBatch => "empty-batch",
            Error::Config(_) | Error::UnknownVariant(_) => "config",
            Error::TrainModeFold => "train-mode-fold",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "config",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
