use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown feature id {id} (vocabulary has {n} features)")]
    UnknownFeature { id: usize, n: usize },

    #[error("category {value:?} not in the {field} vocabulary")]
    OutOfVocabulary { field: String, value: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("checkpoint incompatible with data: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<safetensors::SafeTensorError> for Error {
    fn from(err: safetensors::SafeTensorError) -> Self {
        Error::Archive(err.to_string())
    }
}
