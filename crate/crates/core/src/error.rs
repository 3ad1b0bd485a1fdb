// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by recording, decomposition, alignment and the
/// downstream applications.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are not valid for the requested operation.
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape {
        /// Operation name.
        op: &'static str,
        /// Offending operand shapes.
        shapes: Vec<Vec<usize>>,
    },

    /// An op was recorded while the tape was not recording.
    #[error("recording is not active on this tape")]
    RecordingInactive,

    /// A node id does not exist on the tape.
    #[error("unknown node id {0}")]
    UnknownNode(usize),

    /// A node was passed to an operation that does not accept its kind.
    #[error("node {id} is {found}, expected {expected}")]
    WrongNodeKind {
        /// Node id.
        id: usize,
        /// Kind that was found.
        found: String,
        /// Kind that was expected.
        expected: &'static str,
    },

    /// The decomposition could not classify a node on a traversal path.
    #[error("unclassifiable node {id} ({op}) on decomposition path")]
    Unclassifiable {
        /// Node id.
        id: usize,
        /// Op name.
        op: String,
    },

    /// Reconstruction identity violated.
    #[error("reconstruction residual {residual:.3e} exceeds tolerance {tolerance:.1e}; {report}")]
    Reconstruction {
        /// Relative L2 residual achieved.
        residual: f64,
        /// Tolerance that was required.
        tolerance: f64,
        /// Per-node residual report.
        report: String,
    },

    /// Configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data does not satisfy an operation's precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Training or evaluation produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An artifact file is malformed or fails its integrity checks.
    #[error("corrupt artifact {path}: {reason}")]
    Artifact {
        /// File that failed to load.
        path: PathBuf,
        /// Why it failed.
        reason: String,
    },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Self::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    /// True for errors that signal a violated numeric invariant rather than
    /// bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Reconstruction { .. } | Self::NonFinite(_))
    }
}

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
