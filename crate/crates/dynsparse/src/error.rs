use thiserror::Error;

/// Errors surfaced by the sparse training toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape {rows}x{cols} not divisible by block size {block_size}")]
    IndivisibleShape {
        rows: usize,
        cols: usize,
        block_size: usize,
    },

    #[error("degenerate sparsity: {0}")]
    DegenerateSparsity(String),

    #[error("non-finite value: {0}")]
    Divergence(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer index {0}")]
    UnknownLayer(usize),

    #[error("block ({0}, {1}) not in mask")]
    CoordNotInMask(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
