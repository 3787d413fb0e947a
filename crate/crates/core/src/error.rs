use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("sequence too short for {op}: length {len}, kernel {kernel}, padding {padding}, stride {stride}")]
    SequenceTooShort {
        op: &'static str,
        len: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ingest error for sample {id:?}: {modality} width {found}, manifest declares {expected}")]
    WidthMismatch {
        id: String,
        modality: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("label {label} of sample {id:?} is outside [-3, 3]")]
    LabelOutOfRange { id: String, label: f32 },

    #[error("corrupt record {id:?} in {path}: {reason}")]
    CorruptRecord {
        id: String,
        path: PathBuf,
        reason: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss; non-finite parameters: {params:?}")]
    NonFiniteLoss { params: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match model: missing {missing:?}, extra {extra:?}")]
    CheckpointMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
