use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error("unreadable source: {0}")]
    Source(String),

    #[error("column `{0}` is not present in the input")]
    MissingColumn(String),

    #[error("{rejected} of {total} records rejected ({rate:.4} > allowed {limit:.4})")]
    RejectRate {
        rejected: usize,
        total: usize,
        rate: f64,
        limit: f64,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dataset spans {span_days} day(s), need more than {needed}")]
    TooShort { span_days: i64, needed: i64 },

    #[error("invalid split specification: {0}")]
    InvalidSpec(String),

    #[error("split `{0}` produced no sessions")]
    EmptySplit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("all {0} trials failed: {1}")]
    AllTrialsFailed(usize, String),

    #[error("cache format: {0}")]
    Cache(String),

    #[error(transparent)]
    Bridge(#[from] crate::bridge::BridgeError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io { path: path.into(), err }
    }
}
