use std::io;

use thiserror::Error;

/// Errors produced anywhere in the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("rotation angle {angle:.9} rad is at or beyond the logarithm branch cut")]
    BranchCut { angle: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("agent origin undefined: ray through pixel ({x:.2}, {y:.2}) misses the volume")]
    AgentOriginUndefined { x: f64, y: f64 },

    #[error("non-finite gradient during training step")]
    NonFiniteGradient,

    #[error("non-finite loss after {samples_seen} samples (loss = {loss})")]
    NonFiniteLoss { samples_seen: u64, loss: f64 },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
