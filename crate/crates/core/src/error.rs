use std::path::PathBuf;

/// Errors raised by the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    #[error("sample `{0}` has no latent attributes")]
    MissingLatents(String),

    #[error("missing score at row {row}, column `{column}`")]
    MissingScore { row: usize, column: String },

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (model `{model}`)")]
    NonFiniteLoss { model: String, epoch: usize, step: usize },

    #[error("study incomplete: {rated} of {required} required ratings collected")]
    IncompleteStudy { rated: usize, required: usize },

    #[error("configuration error: {0}")]
    Config(String),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
