use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mask has no foreground pixels")]
    EmptyAnnotation,

    #[error("failed to read {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("record error: {0}")]
    Record(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("injection plan error: unresolved targets [{}]", .0.join(", "))]
    Plan(Vec<String>),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("capacity error: {ground_truths} ground truths but only {queries} queries")]
    Capacity { ground_truths: usize, queries: usize },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-readable tag for the variant, used in structured error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::EmptyAnnotation => "empty_annotation",
            Error::Ingestion { .. } => "ingestion",
            Error::Record(_) => "record",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Plan(_) => "plan",
            Error::Prompt(_) => "prompt",
            Error::Numeric(_) => "numeric",
            Error::Capacity { .. } => "capacity",
            Error::Backend(_) => "backend",
            Error::Divergence(_) => "divergence",
            Error::Evaluation(_) => "evaluation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Tensor(_) => "tensor",
        }
    }
}
