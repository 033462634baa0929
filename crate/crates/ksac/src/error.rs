use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    #[error("allocation error: shape {0:?} overflows the host integer range")]
    Allocation([u64; 4]),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate batch: batch-norm train mode needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("training diverged: non-finite gradient at iteration {iteration}")]
    Divergence { iteration: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
