//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HsdrError>;

#[derive(Debug, Error)]
pub enum HsdrError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix not symmetric at ({row},{col}): |a-b| = {delta:e}")]
    NotSymmetric { row: usize, col: usize, delta: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },

    #[error("invalid component count k={k}, must be in [1, {max}]")]
    InvalidK { k: usize, max: usize },

    #[error("invalid components-per-class m={m} for {n_classes} classes and {bands} bands")]
    InvalidM {
        m: usize,
        n_classes: usize,
        bands: usize,
    },

    #[error("class {class} has {have} samples, need at least {need}")]
    InsufficientClassSamples {
        class: u16,
        have: usize,
        need: usize,
    },

    #[error("{have} samples, need at least {need}")]
    InsufficientSamples { have: usize, need: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("within-class scatter has zero trace")]
    SingularScatter,

    #[error("class {class} has no labeled pixels")]
    EmptyClass { class: u16 },

    #[error("label {label} outside 1..={n_classes}")]
    LabelOutOfRange { label: u16, n_classes: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("format error: {0}")]
    FormatError(String),

    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("method {method} failed: {source}")]
    MethodFailed {
        method: String,
        #[source]
        source: Box<HsdrError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HsdrError {
    /// Wrap an error with the pipeline method it occurred in.
    pub fn in_method(self, method: &str) -> HsdrError {
        HsdrError::MethodFailed {
            method: method.to_string(),
            source: Box::new(self),
        }
    }
}
