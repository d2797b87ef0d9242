use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("group {group} feature has shape {found:?}, expected {expected:?}")]
    GroupShape {
        group: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("degenerate depth at joint {joint}: z = {z}")]
    DegenerateDepth { joint: usize, z: f64 },

    #[error("cannot project joint {joint}: z = {z} is not in front of the camera")]
    Projection { joint: usize, z: f64 },

    #[error("alignment degenerate: {0}")]
    AlignmentDegenerate(String),

    #[error("render precondition: joint {joint} at ({u}, {v}) lies outside a {side}x{side} frame")]
    OutOfFrame {
        joint: usize,
        u: f64,
        v: f64,
        side: usize,
    },

    #[error("pose generator gave up after {0} rejected draws")]
    Generator(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("record {index}: {detail}")]
    Record { index: usize, detail: String },

    #[error("checkpoint does not match the requested configuration: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
