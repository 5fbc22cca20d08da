use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
///
/// The variants are grouped so a front end can map them onto exit codes:
/// [`Error::is_remote`] identifies aggregator/transport failures, everything
/// else is a data or contract error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("rationale references unknown question id {0:?}")]
    DanglingQuestion(String),

    #[error("duplicate rationale for question {question_id:?} from teacher {teacher_id:?}")]
    DuplicateRationale {
        question_id: String,
        teacher_id: String,
    },

    #[error("duplicate question id {0:?}")]
    DuplicateQuestion(String),

    #[error("invalid question {id:?}: {msg}")]
    InvalidQuestion { id: String, msg: String },

    #[error("unknown teacher {0:?}")]
    UnknownTeacher(String),

    #[error("empty training pool")]
    EmptyTrainingPool,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("record {id:?} has dimension {got}, expected {expected}")]
    RecordDim {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("duplicate embedding key ({id:?}, {kind})")]
    DuplicateEmbedding { id: String, kind: String },

    #[error("non-finite value in record {0:?}")]
    NonFiniteRecord(String),

    #[error("missing embedding for ({id:?}, {kind})")]
    MissingEmbedding { id: String, kind: String },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("missing rationale for question {0:?}")]
    MissingRationale(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    NonTransferable(String),

    #[error("aggregator request timed out")]
    Timeout,

    #[error("aggregator returned HTTP {0}")]
    Http(u16),

    #[error("aggregator returned an empty completion")]
    EmptyCompletion,

    #[error("aggregator retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },

    #[error("transport: {0}")]
    Transport(String),

    #[error("io error on {path}: {source}")]
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

    /// True for failures of the remote aggregation path.
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            Error::Timeout
                | Error::Http(_)
                | Error::EmptyCompletion
                | Error::RetriesExhausted { .. }
                | Error::Transport(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
