use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lane: {0}")]
    InvalidLane(String),
    #[error("incomplete lane: {0}")]
    IncompleteLane(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lane matrix has missing entries: {0}")]
    IncompleteMatrix(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("singular least-squares system: {0}")]
    SingularSystem(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("video has no frames")]
    EmptyVideo,
    #[error("ground-truth lanes need persistent track ids")]
    TrackIdRequired,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema violation: {msg}")]
    Schema { line: usize, msg: String },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
