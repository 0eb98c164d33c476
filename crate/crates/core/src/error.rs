use std::path::PathBuf;

use crate::cluster::MachineId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value produced by {0}")]
    NumericalError(&'static str),

    #[error("hyperparameters make the update non-invertible: {0}")]
    NonInvertibleHyper(&'static str),
    #[error("optimizer {0} has no inverse update")]
    NotInvertible(&'static str),
    #[error("block has no applied update to undo")]
    NothingToUndo,
    #[error("block already updated in this iteration")]
    AlreadyUpdated,
    #[error("invalid optimizer hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("no cached forward activation for micro-batch {0}")]
    MissingActivation(usize),

    #[error("channel broken: machine {0} is down")]
    ChannelBroken(MachineId),
    #[error("invalid failure injection: {0}")]
    InvalidInjection(String),
    #[error("machine {0} has not failed")]
    NotFailed(MachineId),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing log data: {0}")]
    MissingLogData(String),
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("no checkpoint available{}", .0.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NoCheckpoint(Option<u64>),
    #[error("checkpoint write torn after {0} blobs")]
    TornWrite(usize),

    #[error("no surviving replica for worker {0}")]
    NoReplica(usize),
    #[error("problem too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("unrecoverable: {0}")]
    Unrecoverable(String),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
