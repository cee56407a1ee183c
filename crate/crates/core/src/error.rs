use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("mesh is not watertight: {} offending edge(s), first {:?}", .0.len(), .0.first())]
    NotWatertight(Vec<(usize, usize)>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
