//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume container: bad {field} ({detail})")]
    Format { field: &'static str, detail: String },

    #[error("truncated volume payload: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("label value {value} out of range 0..{classes} at voxel ({x}, {y}, {z})")]
    LabelOutOfRange {
        value: u8,
        classes: usize,
        x: usize,
        y: usize,
        z: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("phantom generation failed: {reason}; achieved fractions {achieved:?}")]
    Generation { reason: String, achieved: Vec<f64> },

    #[error("refusing to overwrite {path}: {reason}")]
    Refusal { path: PathBuf, reason: String },

    #[error("class {class} has zero voxels in the labeled set; weight undefined")]
    ZeroClass { class: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed manifest at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Wrap an i/o error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
