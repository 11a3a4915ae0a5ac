use std::path::PathBuf;

/// Errors produced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor or argument handed to an operation violates its contract.
    #[error("input error: {0}")]
    Input(String),

    /// Feature maps fed to a neck or head are at the wrong stride.
    #[error("stride mismatch: expected {expected}, got {got} ({context})")]
    StrideMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    /// A loss or gradient became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Annotation category does not belong to the configured taxonomy.
    #[error("taxonomy mismatch: {0}")]
    TaxonomyMismatch(String),

    /// Annotation or manifest content could not be interpreted.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint does not fit the architecture it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// A path named by a manifest or config does not exist.
    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("results schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(String),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
