use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),
    #[error("latent range convention error: {0}")]
    Convention(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("undefined region: {0}")]
    UndefinedRegion(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("missing input {path}: {detail}")]
    Path { path: PathBuf, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn path(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Path {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
