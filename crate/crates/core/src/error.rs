use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("forward cache does not match network: {0}")]
    StaleCache(String),
    #[error("target class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("spectrum is already centered")]
    AlreadyCentered,
    #[error("spectrum is not centered")]
    NotCentered,
    #[error("empty input")]
    EmptyInput,
    #[error("power slope needs at least 3 nonzero radii beyond DC, found {0}")]
    InsufficientBins(usize),
    #[error("cutoff must be nonnegative, got {0}")]
    NegativeSigma(f64),
    #[error("low-pass output has imaginary residual {0:e}")]
    ImaginaryResidual(f64),
    #[error("layer {0} is not a Conv2D layer")]
    NotAConvLayer(usize),
    #[error("RISE masks left at least one pixel uncovered")]
    DegenerateMasks,
    #[error("subset size {size} is degenerate for {pixels} pixels")]
    DegenerateSubsetSize { size: usize, pixels: usize },
    #[error("method {0} does not consume gradients and cannot be filtered in gradient mode")]
    UnsupportedMethod(String),
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("label count {labels} does not match image count {images}")]
    CountMismatch { images: usize, labels: usize },
    #[error("split violation: {0}")]
    SplitViolation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// True for errors caused by bad input data or files rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidConfig(_))
    }
}
