use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {record}: {message}", file.display())]
    Parse {
        file: PathBuf,
        record: String,
        message: String,
    },
    #[error("no tracks found in {}", .0.display())]
    EmptyDataset(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
