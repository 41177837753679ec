use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hierarchy: malformed input: {0}")]
    Malformed(String),
    #[error("hierarchy: duplicate node id {0}")]
    DuplicateId(i64),
    #[error("hierarchy: node {id}: {reason}")]
    InvalidNode { id: i64, reason: String },
    #[error("hierarchy: cycle detected through node {0}")]
    Cycle(i64),
    #[error("hierarchy: leaf {0} does not reach a top-level node")]
    OrphanLeaf(i64),
    #[error("hierarchy: unknown node id {0}")]
    UnknownNode(i64),

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {0} has no positive samples")]
    EmptyClass(usize),
    #[error("sample {0} has no positive label")]
    EmptyRow(usize),
    #[error("invalid group thresholds: many={many} must exceed few={few} >= 1")]
    Thresholds { many: usize, few: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("negative weight {value} at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("phase {phase} diverged at epoch {epoch}: loss is not finite")]
    Diverged { phase: u8, epoch: usize },
    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("{path}: truncated file: {reason}")]
    Truncated { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
