use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter domain: {0}")]
    ParameterDomain(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: String, step: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("unreadable image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("class mismatch: {0}")]
    ClassMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short identifier for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ParameterDomain(_) => "parameter_domain",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Dataset(_) => "dataset",
            Error::Image { .. } => "image",
            Error::OutputExists(_) => "output_exists",
            Error::ClassMismatch(_) => "class_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Candle(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
