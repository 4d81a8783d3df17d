use std::path::PathBuf;

use thiserror::Error;

use crate::network::LayerId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("rgb-required: input image has no color channels")]
    RgbRequired,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("inconsistent geometry: {0}")]
    Geometry(String),

    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaOutOfRange(f64),

    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("no layers requested")]
    NoLayers,

    #[error("corrupt weight file: {0}")]
    CorruptWeights(String),

    #[error("missing layer {0} in weight file")]
    MissingLayer(String),

    #[error("shape mismatch for {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("feature maps lack layer {0}")]
    MissingFeatures(LayerId),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid loss configuration: {0}")]
    LossConfig(String),

    #[error("invalid optimizer configuration: {0}")]
    OptimConfig(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("invalid hole: {0}")]
    InvalidHole(String),

    #[error("invalid tile request: {0}")]
    InvalidRequest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
