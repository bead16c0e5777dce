use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed graph description, spec, or config.
    #[error("validation error in {record}: {message}")]
    Validation { record: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("nothing to complete: the graph has no nodes without attributes")]
    NothingToComplete,

    #[error("modularity is undefined for a graph without edges")]
    NoEdges,

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("cluster id {id} out of range for {clusters} clusters")]
    ClusterOutOfRange { id: usize, clusters: usize },

    #[error("results were produced on different graphs ({left} vs {right})")]
    GraphMismatch { left: String, right: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn validation(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            record: record.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than a failure during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Config(_)
                | Error::NothingToComplete
                | Error::EmptySplit(_)
                | Error::Parse { .. }
                | Error::GraphMismatch { .. }
        )
    }
}
