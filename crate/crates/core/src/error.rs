use std::path::PathBuf;

/// Coarse error classes, used by the CLI to pick an exit code and by the
/// service to pick a status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Config,
    Backend,
    Internal,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Input => "input",
            ErrorClass::Config => "config",
            ErrorClass::Backend => "backend",
            ErrorClass::Internal => "internal",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid embedding file {path}: {message}")]
    EmbeddingFile { path: PathBuf, message: String },

    #[error("caption count {captions} does not match embedding count {embeddings}")]
    CountMismatch { captions: usize, embeddings: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate caption id {0:?}")]
    DuplicateId(String),

    #[error("record {index} has a zero-norm embedding and cannot be normalized")]
    ZeroNorm { index: usize },

    #[error("non-finite value in vector {index}")]
    NonFinite { index: usize },

    #[error("empty text")]
    EmptyText,

    #[error("need at least {required} points, got {actual}")]
    TooFewPoints { required: usize, actual: usize },

    #[error("degenerate mean over {members} members: zero norm")]
    DegenerateMean { members: usize },

    #[error("{backend} backend failed after {attempts} attempt(s): {message}")]
    Backend {
        backend: &'static str,
        attempts: u32,
        message: String,
    },

    #[error("compaction failed at level {level}, cluster {cluster}: {source}")]
    Compaction {
        level: usize,
        cluster: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("anchor {anchor}: {source}")]
    Anchor {
        anchor: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt bank file: {0}")]
    Corrupt(String),

    #[error("unsupported bank format version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::MalformedLine { .. }
            | Error::EmbeddingFile { .. }
            | Error::CountMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::DuplicateId(_)
            | Error::ZeroNorm { .. }
            | Error::NonFinite { .. }
            | Error::EmptyText
            | Error::TooFewPoints { .. }
            | Error::DegenerateMean { .. }
            | Error::Corrupt(_)
            | Error::Version { .. }
            | Error::Checksum { .. }
            | Error::Invalid(_) => ErrorClass::Input,
            Error::Config(_) => ErrorClass::Config,
            Error::Backend { .. } => ErrorClass::Backend,
            Error::Compaction { source, .. } | Error::Anchor { source, .. } => source.class(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
