use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range [0, {train_timesteps})")]
    TimestepOutOfRange { t: usize, train_timesteps: usize },

    #[error("instruction has {count} tokens, expected 1..={max}")]
    TokenCount { count: usize, max: usize },

    #[error("bank bound to backend `{bank}` cannot be used with backend `{backend}`")]
    BackendMismatch { bank: String, backend: String },

    #[error("instruction bank has not been trained")]
    UntrainedBank,

    #[error("unknown backend `{0}`")]
    UnknownBackend(String),

    #[error("bank file: bad magic bytes")]
    BadMagic,

    #[error("bank file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("bank file: payload checksum mismatch (manifest {expected:08x}, payload {actual:08x})")]
    Checksum { expected: u32, actual: u32 },

    #[error("bank file: manifest/payload inconsistency: {0}")]
    Manifest(String),

    #[error("non-finite loss at segment {segment}, step {step}")]
    NonFiniteLoss { segment: usize, step: usize },

    #[error("degenerate {0} direction: mean embedding difference has zero norm")]
    DegenerateDirection(&'static str),

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Io { .. } | Error::Image { .. }
        )
    }
}
