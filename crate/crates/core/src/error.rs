use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("kv cache overflow: {needed} positions requested, max_seq_len is {max}")]
    CacheOverflow { needed: usize, max: usize },

    /// Absolute positional encodings are added right after the embedding
    /// lookup, so the first layer's inputs depend on the position and
    /// cannot be tabulated per token.
    #[error("ineligible architecture: {0}")]
    IneligibleArchitecture(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
