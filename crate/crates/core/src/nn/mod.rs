//! Minimal dense-network numeric core: matrices, MLPs with reverse-mode
//! gradients, and the Adam optimizer. Everything is `f64`.

mod adam;
mod matrix;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{
    sigmoid, softplus, Activation, Backward, GradTape, LayerRecord, LayerShape, MlpCheckpoint, MlpGrads,
    MlpParams, MLP_FORMAT,
};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("non-finite network output")]
    NonFiniteOutput,
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("non-finite parameter in layer {layer}")]
    NonFiniteParameter { layer: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("gradient tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("gradient tape was recorded against different parameter values")]
    StaleTape,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
