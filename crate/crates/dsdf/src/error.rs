use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: unsupported image format (expected PNG or binary PPM)", path.display())]
    UnsupportedFormat { path: PathBuf },
    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite values in `{tensor}`")]
    Diverged { epoch: usize, step: usize, tensor: String },
    #[error(transparent)]
    Core(#[from] dsdf_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
