use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotor axis norm {norm:e} is below the degenerate floor {floor:e}")]
    DegenerateAxis { norm: f64, floor: f64 },

    #[error("rotor norm {norm} deviates from 1 by more than {tolerance:e}")]
    NonUnitRotor { norm: f64, tolerance: f64 },

    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("loss must be scalar-shaped, got {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("capsule field {height}x{width} is smaller than the {kernel}x{kernel} receptive field")]
    FieldTooSmall {
        height: usize,
        width: usize,
        kernel: usize,
    },

    #[error("EM routing needs at least one child capsule")]
    EmptyChildren,

    #[error("pose grid {pose:?} and activation grid {activation:?} are not spatially aligned")]
    AlignmentError {
        pose: Vec<usize>,
        activation: Vec<usize>,
    },

    #[error("target class {target} is out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },

    #[error("bad magic {found:#010x} in {path} (expected one of {expected:x?})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: Vec<u32>,
    },

    #[error("{path} is truncated: expected {expected} bytes, found {actual}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing companion file {0}")]
    MissingCompanion(PathBuf),

    #[error("sample {index} carries no viewpoint metadata")]
    MissingMeta { index: usize },

    #[error("dataset missing: {0}")]
    DatasetMissing(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { step: u64, batch: usize, loss: f64 },

    #[error("checkpoint does not match the configured model: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
