use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("layer `{layer}`: shape mismatch, expected {expected:?} but got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },

    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("missing weight entry `{0}`")]
    MissingWeight(String),

    #[error("corpus file: {0}")]
    CorpusFormat(String),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("mask is {mask_width}x{mask_height} but image is {image_width}x{image_height}")]
    MaskMismatch {
        image_width: u32,
        image_height: u32,
        mask_width: u32,
        mask_height: u32,
    },

    #[error("image {width}x{height} is smaller than patch size {size}")]
    ImageTooSmall { width: u32, height: u32, size: usize },

    #[error("dataset has no {0} images")]
    EmptyRole(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all {0} training iterations aborted")]
    AllIterationsAborted(usize),

    #[error("synthetic generator: {0}")]
    Generator(String),

    #[error("bounding box {top},{left}..{bottom},{right} lies outside a {width}x{height} image")]
    BoxOutOfBounds {
        top: u32,
        left: u32,
        bottom: u32,
        right: u32,
        width: u32,
        height: u32,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: &str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            layer: layer.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn layer(layer: &str, reason: impl Into<String>) -> Self {
        Error::InvalidLayer {
            layer: layer.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Manifest { .. }
                | Error::MaskMismatch { .. }
                | Error::EmptyRole(_)
                | Error::ShapeMismatch { .. }
                | Error::InvalidLayer { .. }
                | Error::MissingWeight(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
