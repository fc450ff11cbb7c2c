use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("EmptyMask")]
    EmptyMask,
    #[error("InconsistentLabels: {0}")]
    InconsistentLabels(String),
    #[error("BadShape: {0}")]
    BadShape(String),
    #[error("DatasetCorrupt: {0}")]
    DatasetCorrupt(String),
    #[error("NonFiniteLoss: {0}")]
    NonFiniteLoss(String),
    #[error("Checkpoint: {0}")]
    Checkpoint(String),
    #[error("Config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
