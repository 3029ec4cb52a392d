use thiserror::Error;

use crate::env::Cell;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cell ({}, {}) lies outside the {width}x{height} grid", cell.x, cell.y)]
    OutOfGrid { cell: Cell, width: usize, height: usize },

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("device {0} has an empty neighbourhood")]
    IsolatedDevice(usize),

    #[error("no data: {0}")]
    EmptyData(String),

    #[error("missing data for task {0}")]
    MissingTask(usize),

    #[error("unknown built-in `{0}`")]
    UnknownBuiltin(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
