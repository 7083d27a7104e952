use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    ShapeMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },

    /// Every category the detector knows was found in the pre-detection, so
    /// there is no label left to steer proposals towards.
    #[error("no non-sensitive category left: all {0} categories were pre-detected")]
    EmptyNonSensitiveSet(usize),

    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("report verification failed for row `{row}`: {detail}")]
    ReportVerification { row: String, detail: String },

    #[error("incompatible format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
