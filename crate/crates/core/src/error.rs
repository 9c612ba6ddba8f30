use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?} but got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("graph: {0}")]
    Graph(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn at_layer(layer: &str, source: Error) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(source),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by the filesystem or malformed files, as
    /// opposed to bad arguments or numerical failures.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Layer { source, .. } => source.is_io(),
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => true,
            _ => false,
        }
    }
}

/// Failures specific to reading and writing `INFL` checkpoint containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"INFL\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("malformed header line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },

    #[error("records `{first}` and `{second}` overlap")]
    OverlappingRecords { first: String, second: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("record `{name}` has length {length} but shape implies {expected}")]
    LengthMismatch {
        name: String,
        length: usize,
        expected: usize,
    },

    #[error("ambiguous mapping for `{name}`: candidates {candidates:?}")]
    AmbiguousMapping {
        name: String,
        candidates: Vec<String>,
    },
}
