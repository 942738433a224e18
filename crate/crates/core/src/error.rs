use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },

    #[error("line {line}: unknown label \"{label}\"")]
    UnknownLabel { label: String, line: usize },

    #[error("duplicate defect id \"{0}\"")]
    DuplicateId(String),

    #[error("invalid defect \"{id}\": {reason}")]
    InvalidDefect { id: String, reason: String },

    #[error("invalid registry: {0}")]
    InvalidRegistry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("autodiff graph error: {0}")]
    Graph(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }

    /// True for failures caused by bad input data or files rather than
    /// by a bug or an unsatisfiable numeric state.
    pub fn is_data_error(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_data_error();
        }
        matches!(
            self,
            Error::Io { .. }
                | Error::Malformed { .. }
                | Error::UnknownLabel { .. }
                | Error::DuplicateId(_)
                | Error::InvalidDefect { .. }
                | Error::InvalidRegistry(_)
                | Error::Config(_)
                | Error::Empty(_)
                | Error::CorruptCheckpoint(_)
                | Error::VocabMismatch { .. }
                | Error::Lineage(_)
                | Error::Json(_)
        )
    }
}
