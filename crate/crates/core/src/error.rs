use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("voxel coordinate {value} outside the encodable range (|i| < 2^20)")]
    Range { value: i64 },

    #[error("map is empty")]
    EmptyMap,

    /// A caller violated a shape or sequencing contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error in {term}: {detail}")]
    Training { term: String, detail: String },

    /// Training produced a non-finite loss; the map was rolled back to the
    /// last good checkpoint.
    #[error("training diverged at step {step} ({term}); restored checkpoint from step {last_good_step}")]
    Diverged {
        step: usize,
        last_good_step: usize,
        term: String,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// All problems found while validating a configuration.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("alignment failed for pair {pair}: {detail}")]
    Alignment { pair: String, detail: String },

    #[error("unknown instance id {0} (not in vocabulary)")]
    UnknownInstance(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
