use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: invalid shape, expected {expected} but found {found}")]
    Shape { op: &'static str, expected: String, found: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("template {index} must contain exactly one `{{}}` placeholder, found {found}")]
    Template { index: usize, found: usize },

    #[error("{what}: expected {expected}, found {found}")]
    Mismatch { what: String, expected: String, found: String },

    #[error("{0}")]
    Format(String),

    #[error("every pixel is ignored; loss is undefined")]
    EmptyLoss,

    #[error("no class has a non-empty union; mIoU is undefined")]
    EmptyMiou,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Shape { op, expected: expected.into(), found: found.into() }
    }

    pub(crate) fn mismatch(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Mismatch { what: what.into(), expected: expected.to_string(), found: found.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
