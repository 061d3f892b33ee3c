use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown {kind} label `{label}` in {split} split")]
    UnknownLabel {
        kind: &'static str,
        label: String,
        split: String,
    },

    #[error("speaker id {speaker} out of range 1..={num_speakers}")]
    Speaker { speaker: usize, num_speakers: usize },

    #[error("empty dialog")]
    EmptyDialog,

    #[error("checkpoint mismatch on key `{key}`: checkpoint has {checkpoint}, config has {config}")]
    CheckpointMismatch {
        key: String,
        checkpoint: String,
        config: String,
    },

    #[error("non-finite loss at epoch {epoch}, dialog {dialog}")]
    NonFiniteLoss { epoch: usize, dialog: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
