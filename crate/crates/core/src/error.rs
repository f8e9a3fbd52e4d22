use thiserror::Error;

/// Errors raised anywhere in the engine, the training loop or the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("second-order gradient is not supported through `{0}`")]
    SecondOrderUnsupported(&'static str),

    #[error("weight matrix is zero; spectral norm undefined")]
    ZeroWeight,

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluator reached held-out accuracy {achieved:.4} < {required}; increase the training budget")]
    EvaluatorAccuracy { achieved: f64, required: f64 },

    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch in checkpoint entry `{0}`")]
    ChecksumMismatch(String),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
