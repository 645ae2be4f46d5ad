use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("subject {subject}: file not found: {}", path.display())]
    MissingFile { subject: String, path: PathBuf },

    #[error("subject {subject}: row {row} has {found} columns, expected {expected}")]
    RaggedRows {
        subject: String,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("subject {subject}: row {row}, column {col}: not a number: {cell:?}")]
    NonNumeric {
        subject: String,
        row: usize,
        col: usize,
        cell: String,
    },

    #[error("subject {subject}: matrix file is empty")]
    EmptyMatrix { subject: String },

    #[error("subject {subject}: row {row} contains a non-finite value")]
    NonFinite { subject: String, row: usize },

    #[error("subject {subject}: has {found} components, expected {expected}")]
    InconsistentComponents {
        subject: String,
        expected: usize,
        found: usize,
    },

    #[error("manifest {}: line {line}: {detail}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("evaluation set needs both classes (positives: {positives}, negatives: {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Bad input or configuration, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged(_))
    }
}
