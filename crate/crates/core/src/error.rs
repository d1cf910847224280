use std::io;

use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes of the public
/// operations: parse/validation problems are reported before any work runs,
/// domain/range errors guard preconditions, and the stale/malformed variants
/// cover the measurement-handling edge cases.
#[derive(Debug, Error)]
pub enum Error {
    #[error("map format: {0}")]
    MapFormat(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("stale measurement: {0}")]
    StaleMeasurement(String),
    #[error("malformed measurement: {0}")]
    MalformedMeasurement(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("degenerate evidence: {0}")]
    DegenerateEvidence(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
