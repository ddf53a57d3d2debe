use std::path::PathBuf;

use catt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("grid rectangles of cells {a} and {b} overlap")]
    GridOverlap { a: u32, b: u32 },
    #[error("cell {0} has no text box, required in text-focused mode")]
    MissingTextBox(u32),
    #[error("box {bbox:?} lies outside a {width}x{height} image")]
    OutOfBounds {
        bbox: [u32; 4],
        width: u32,
        height: u32,
    },
    #[error("image has zero area")]
    EmptyImage,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no cells to index")]
    NoCells,
    #[error("layout infeasible after {retries} attempts: {reason}")]
    InfeasibleLayout { retries: usize, reason: String },
    #[error("no candidate pairs to train on")]
    EmptyPairSet,
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model variant mismatch: checkpoint holds `{found}`, expected `{expected}`")]
    VariantMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("cell universes differ between predicted and reference structures")]
    UniverseMismatch,
    #[error("all-zero confusion matrix")]
    EmptyConfusion,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
