use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pruning, encoding and execution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported kernel size {rows}x{cols}: only 3x3 kernels carry patterns")]
    UnsupportedKernel { rows: usize, cols: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged in layer {layer}: {detail}")]
    Divergence { layer: usize, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error in `{array}` at position {position}: {detail}")]
    Format {
        array: String,
        position: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed with {} violation(s)", .0.len())]
    Validation(Vec<Violation>),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A single schema violation located by a JSON path such as `$.layers[0].tile.h`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(array: &str, position: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        array: array.to_string(),
        position,
        detail: detail.into(),
    }
}
