use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("unknown category id {0}")]
    UnknownCategory(u32),
    #[error("duplicate category id {0}")]
    DuplicateCategory(u32),
    #[error("unknown sample id {0}")]
    UnknownSample(String),
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
    #[error("mask required: in-situ samples must carry an object mask")]
    MaskRequired,
    #[error("naive samples cannot carry an object mask at capture time")]
    UnexpectedMask,
    #[error("invalid phase transition from {from} to {to}")]
    PhaseTransition { from: String, to: String },
    #[error("need >= 2 categories, got {0}")]
    TooFewCategories(usize),
    #[error("category {0} has no samples")]
    EmptyCategory(u32),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("embedding length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("model file error: {0}")]
    ModelFile(String),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
