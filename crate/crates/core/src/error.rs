//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: degenerate batch: {detail}")]
    DegenerateBatch { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {context}{}: {detail}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        context: String,
        offset: Option<u64>,
        detail: String,
    },

    #[error("config error: field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("text too short: {0}")]
    TooShort(String),

    #[error("numeric divergence at epoch {epoch}, episode {episode}: {detail}")]
    Divergence {
        epoch: usize,
        episode: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(context: impl Into<String>, offset: Option<u64>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            offset,
            detail: detail.into(),
        }
    }
}
