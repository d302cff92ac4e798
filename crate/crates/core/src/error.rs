use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate patch: standard deviation below 1e-8")]
    DegeneratePatch,

    #[error("needle ROI is empty after mask intersection")]
    EmptyRoi,

    #[error("window {window:?} exceeds image dimensions {image:?}")]
    WindowTooLarge {
        window: (usize, usize),
        image: (usize, usize),
    },

    #[error("negative evidence ({0}, {1})")]
    NegativeEvidence(f64, f64),

    #[error("{0} requires both classes present")]
    SingleClass(&'static str),

    #[error("oracle labels missing for {0}")]
    MissingOracle(&'static str),

    #[error("malformed dataset file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
