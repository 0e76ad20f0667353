use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Every failure the simulator can surface.
///
/// The variants are grouped so front ends can map them onto exit codes:
/// configuration and input problems (`Config`, `Trace`, `Io`) on one side,
/// failures that only show up while simulating on the other.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("trace error at line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("hardware model error: {0}")]
    Hardware(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("admission error for request {request}: {message}")]
    Admission { request: u64, message: String },

    #[error("deadlock: event queue drained with unserviced requests {stuck:?}")]
    Deadlock { stuck: Vec<u64> },

    #[error("metrics error: {0}")]
    Metrics(String),
}

impl SimError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than by simulation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SimError::Config { .. } | SimError::Trace { .. } | SimError::Io { .. }
        )
    }
}
