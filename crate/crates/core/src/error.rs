use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("batch norm needs at least 2 rows in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{what} {value} out of range 0..={max}")]
    Range {
        what: &'static str,
        value: usize,
        max: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("KL divergence is infinite: q[{index}] = {q} but p[{index}] = 0")]
    InfiniteDivergence { index: usize, q: f64 },

    #[error("non-finite activation at depth {0}")]
    ActivationDivergence(usize),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("checkpoint version {found} is incompatible (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
