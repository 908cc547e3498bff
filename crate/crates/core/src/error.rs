use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("unknown strategy name {0:?}")]
    UnknownStrategy(String),
    #[error("need at least {needed} dialogues to split, got {got}")]
    TooFewDialogues { needed: usize, got: usize },
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is not in the vocabulary")]
    InvalidTokenId(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty post")]
    EmptyPost,
    #[error("empty retrieval index")]
    EmptyIndex,
    #[error("cognitive state generation failed: {0}")]
    Generation(String),
    #[error("decoder prefix of length {len} reaches the maximum decode length {max}")]
    DecodeOverflow { len: usize, max: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        detail: String,
    },
    #[error("checkpoint vocabulary hash {found} does not match vocabulary hash {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid index file: {0}")]
    IndexFormat(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("degenerate metric table: {0}")]
    MetricTable(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
