use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward must start from a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bit-width must be at least 2 (and at most 24), got {0}")]
    BitWidth(u32),

    #[error("quantizer scale must be positive, got {0}")]
    NonPositiveScale(f32),

    #[error("invalid range: x_min={x_min}, x_max={x_max}")]
    InvalidRange { x_min: f32, x_max: f32 },

    #[error("{0} requires a nonempty input")]
    Empty(&'static str),

    #[error("unknown quantization configuration {0} (expected 1, 2, 3 or 4)")]
    UnknownConfig(u8),

    #[error("configuration has no offset: {0}")]
    NoOffset(String),

    #[error("weight quantizer must be symmetric (no offset) for folding, layer {0}")]
    AsymmetricWeights(usize),

    #[error("integer accumulator overflow in layer {0}")]
    AccumulatorOverflow(usize),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("network: {0}")]
    Network(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
