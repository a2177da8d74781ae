//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map errors to process exit
/// codes (config = 2, model/weights = 3, numeric = 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Model,
    Numeric,
    Data,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown model '{id}'; registered models: {known:?}")]
    UnknownModel { id: String, known: Vec<String> },

    #[error("unknown layer '{id}' for model '{model}'; available layers: {available:?}")]
    UnknownLayer {
        model: String,
        id: String,
        available: Vec<String>,
    },

    #[error("model '{id}' requires a weights file: {hint}")]
    WeightsRequired { id: String, hint: String },

    #[error("weights mismatch: expected architecture '{expected}', file contains '{found}'")]
    WeightsMismatch { expected: String, found: String },

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("numeric error in {context}")]
    Numeric { context: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::UnknownModel { .. }
            | Error::UnknownLayer { .. }
            | Error::WeightsRequired { .. }
            | Error::WeightsMismatch { .. }
            | Error::Adapter(_) => ErrorClass::Model,
            Error::Numeric { .. } | Error::InvalidInput(_) => ErrorClass::Numeric,
            Error::Dataset(_) | Error::Train(_) | Error::Metric(_) => ErrorClass::Data,
            _ => ErrorClass::Other,
        }
    }

    pub(crate) fn shape(context: &str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
