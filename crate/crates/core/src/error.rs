use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("degenerate batch: batch normalization needs at least 2 rows in train mode, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("ragged panel: unit `{unit}` has {len} periods, expected {expected}")]
    RaggedPanel {
        unit: String,
        len: usize,
        expected: usize,
    },

    #[error("unknown unit `{0}`")]
    UnknownUnit(String),

    #[error("unknown regressor `{0}`")]
    UnknownRegressor(String),

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("infeasible split: window of {total} periods cannot hold train/validation/test with horizon {horizon}")]
    InfeasibleSplit { total: usize, horizon: usize },

    #[error("insufficient history: need {needed} periods, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("every grid point failed: {}", .0.join("; "))]
    AllFitsDiverged(Vec<String>),

    #[error("record keys do not match: {}", .0.join(", "))]
    KeyMismatch(Vec<String>),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("duplicate key {0}")]
    DuplicateKey(String),

    #[error("ground truth is required (synthetic data only)")]
    MissingGroundTruth,

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("lookahead violation: {0}")]
    Lookahead(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
