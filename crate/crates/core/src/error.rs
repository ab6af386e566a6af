use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error: {0}")]
    Syntax(String),

    /// Violated schema rule; `path` is the dotted location of the offending field.
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value out of range: {0}")]
    ValueOutOfRange(String),

    #[error("prototype {0} is inactive")]
    InactivePrototype(usize),

    #[error("no rule registered for layer `{0}`")]
    UnsupportedLayer(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("projection set is empty{0}")]
    EmptyProjectionSet(String),

    #[error("pruning would deactivate every prototype")]
    AllPruned,

    #[error("unknown perturbation kind `{0}`")]
    UnknownKind(String),

    #[error("item `{0}` has no ground-truth mask")]
    MissingMask(String),

    #[error("rng snapshot does not match context: {0}")]
    SchemaMismatch(String),

    #[error("checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config `{file}` hash mismatch: recorded {recorded}, found {found}")]
    HashMismatch {
        file: String,
        recorded: String,
        found: String,
    },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unknown legacy format `{0}`")]
    UnknownFormat(String),

    #[error("legacy file is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input (bad configs, files, arguments)
    /// rather than by a defect in the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}
