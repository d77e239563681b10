use std::path::PathBuf;

use thiserror::Error;

/// Which outcome class an estimator was missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Positive,
    Negative,
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Class::Positive => f.write_str("positive (y=1)"),
            Class::Negative => f.write_str("negative (y=0)"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{column}` not found")]
    MissingColumn { column: String },

    #[error("parse error at row {row}, column `{column}`: cannot read `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("key error: {0}")]
    Key(String),

    #[error("formula syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },

    #[error("unsupported formula construct: {0}")]
    Unsupported(String),

    #[error("name error: `{0}` is not an attribute, covariate, or Y")]
    UnresolvedName(String),

    #[error("level error: level `{level}` is not declared for attribute `{attribute}`")]
    UnknownLevel { attribute: String, level: String },

    #[error("insufficient data: no {0} examples")]
    InsufficientClass(Class),

    #[error("undefined metric: no scores exceed the threshold {threshold}")]
    UndefinedMetric { threshold: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("linear algebra error: {0}")]
    LinAlg(String),

    #[error("stale posterior: draws were fitted for a different model or schema")]
    Stale,

    #[error("data error: {0}")]
    Data(String),

    #[error("population spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("subpopulation {key}: {source}")]
    Cell {
        key: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_cell(self, key: impl ToString) -> Error {
        Error::Cell {
            key: key.to_string(),
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through cell annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Cell { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
