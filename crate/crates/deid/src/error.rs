use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeidError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<DeidError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DeidError>;
