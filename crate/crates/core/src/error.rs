use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("masking order must be at least 2, got {0}")]
    InvalidOrder(usize),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid simulation config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate partition: {0}")]
    Partition(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("basis does not match model: {0}")]
    Basis(String),

    #[error("need at least {needed} traces, got {got}")]
    InsufficientTraces { needed: usize, got: usize },

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (gradient norms per layer: {grad_norms:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        grad_norms: Vec<f64>,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad magic bytes: not a {0} file")]
    Magic(&'static str),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}
