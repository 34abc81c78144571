use thiserror::Error;

use crate::operators::GridError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("non-finite {term}{}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite {
        term: &'static str,
        iteration: Option<usize>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("grid mismatch: network expects {expected} nodes, data has {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("analytic solution undefined: {0}")]
    Domain(String),
    #[error("no finite values to summarize ({flagged} flagged)")]
    AllFlagged { flagged: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
