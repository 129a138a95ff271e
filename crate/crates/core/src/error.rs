use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("patch `{patch_id}` has no matching mask")]
    MissingMask { patch_id: String },

    #[error("file `{file}` does not match layout pattern `{pattern}`")]
    LayoutMismatch { file: String, pattern: String },

    #[error("invalid layout spec: {0}")]
    Layout(String),

    #[error("dimension mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid run-length encoding: {0}")]
    Rle(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("center `{center}` holds {available} patches, {requested} requested")]
    CenterTooSmall {
        center: String,
        available: usize,
        requested: usize,
    },

    #[error("augmentation error: {0}")]
    Augment(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("non-finite loss at step {step}: supervised={sup}, unsupervised={unsup}")]
    NonFiniteLoss { step: usize, sup: f64, unsup: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownConfigKey { key: String, valid: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::MissingMask { .. } => "missing-mask",
            Error::LayoutMismatch { .. } | Error::Layout(_) => "layout",
            Error::Shape { .. } => "shape",
            Error::Rle(_) => "rle",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Manifest(_) => "manifest",
            Error::CenterTooSmall { .. } => "center-too-small",
            Error::Augment(_) => "augment",
            Error::Model(_) => "model",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) | Error::UnknownConfigKey { .. } => "config",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
