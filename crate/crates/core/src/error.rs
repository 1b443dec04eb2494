//! Error type shared by the whole crate.
//!
//! Variants are grouped by *who is at fault*: bad user input (specs,
//! parameters, matrices, parse failures), numerical non-convergence, and I/O.
//! The CLI maps these groups onto distinct process exit codes.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A topology-spec string (or schedule spec) could not be understood.
    #[error("invalid topology spec `{spec}`: {reason}")]
    InvalidSpec { spec: String, reason: String },

    /// A numeric or structural argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix fails the gossip-matrix invariants (symmetry, stochasticity,
    /// nonnegativity) beyond tolerance.
    #[error("invalid gossip matrix: {0}")]
    InvalidMatrix(String),

    /// Text input (CSV, edge list) is readable but malformed.
    #[error("parse error: {0}")]
    Parse(String),

    /// An iterative routine failed to reach its tolerance within its budget,
    /// or an internal numerical consistency check failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Filesystem access failed.
    #[error("I/O error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Helper for I/O failures that keeps the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
