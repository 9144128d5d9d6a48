use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by map construction, rendering, and localization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),

    #[error("empty initialization cloud")]
    EmptyCloud,

    #[error("empty map")]
    EmptyMap,

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty mask — refinement unconstrained")]
    EmptyMask,

    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),

    #[error("degenerate or outlier-dominated input")]
    PnpDegenerate,

    #[error("unknown frame id {0}")]
    UnknownFrame(u32),

    #[error("empty retrieval database")]
    EmptyDatabase,

    #[error("localization failed: {}", .reasons.join("; "))]
    LocalizationFailed { reasons: Vec<String> },

    #[error("no training views")]
    NoViews,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image decode/encode error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
