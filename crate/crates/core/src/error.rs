use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. `detail` names the offending dimensions.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    /// Malformed binary input. `offset` is the byte position where parsing failed.
    #[error("{}: malformed file at byte {offset}: {detail}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward called on {0} without a saved forward context")]
    MissingContext(&'static str),

    /// Training loss became non-finite. The last finite checkpoint is attached.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        last_good: Option<Box<crate::harness::Checkpoint>>,
    },

    #[error("{0}")]
    Serde(String),
}

impl Error {
    /// Stable short name of the variant, for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Domain { .. } => "domain",
            Error::Label { .. } => "label",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::NonFinite(_) => "non-finite",
            Error::MissingContext(_) => "missing-context",
            Error::Diverged { .. } => "diverged",
            Error::Serde(_) => "serde",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
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
}
