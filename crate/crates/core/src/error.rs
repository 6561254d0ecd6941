//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("curation error: {0}")]
    Curation(String),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cluster error: {0}")]
    Cluster(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Curation paths record failures per record instead of aborting; this
    /// helper tags the message with the offending record for those reports.
    pub fn for_record(self, image_ref: &str) -> Error {
        match self {
            Error::Curation(m) => Error::Curation(format!("{image_ref}: {m}")),
            other => other,
        }
    }
}
