use std::path::PathBuf;

use thiserror::Error;

use crate::ir::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: area must be strictly positive")]
    ZeroAreaBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("graph {image_id} failed validation: {}", format_violations(.violations))]
    InvalidGraph {
        image_id: String,
        violations: Vec<Violation>,
    },

    #[error("invalid record {image_id}: {reason}")]
    InvalidRecord { image_id: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("empty caption")]
    EmptyCaption,

    #[error("missing {what} for {key}")]
    ProviderMiss { what: &'static str, key: String },

    #[error("target distribution is undefined")]
    UndefinedTarget,

    #[error("zero-norm embedding for {0}")]
    ZeroNorm(String),

    #[error("invalid fusion weights ({0}, {1}): must be nonnegative and sum to 1")]
    InvalidWeights(f64, f64),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Tags an error with the pipeline stage it came from.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e {
            tagged @ Error::Stage { .. } => tagged,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
