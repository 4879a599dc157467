use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("ingestion failed: {0}")]
    Ingestion(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("flow backend `{backend}` failed: {cause}")]
    Backend { backend: String, cause: String },
    #[error("inconsistent recurrent state: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("incompatible checkpoint version {found} (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },
    #[error("ablation mode `{mode}` is incompatible with this checkpoint: {reason}")]
    IncompatibleMode { mode: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] vdeblur_autograd::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
