//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto stable exit codes: config errors exit 2,
//! numerical errors exit 3, I/O and format errors exit 4.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown keys, invalid values, impossible requests.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an API precondition (shape mismatch, wrong metadata).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or divergence inside a numerical computation.
    #[error("numerical error{}: {msg}", match node { Some(n) => format!(" at node {n}"), None => String::new() })]
    Numerical {
        /// Tape node id that produced the non-finite value, when known.
        node: Option<usize>,
        msg: String,
    },

    /// Malformed file contents (WAV chunks, checkpoint container, manifests).
    #[error("format error: {0}")]
    Format(String),

    /// Evaluation bookkeeping failures (missing stems, empty result sets).
    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(node: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numerical { node, msg: msg.into() }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn report(msg: impl Into<String>) -> Self {
        Error::Report(msg.into())
    }

    /// Stable process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Format(_) | Error::Report(_) | Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
