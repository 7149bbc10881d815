//! Minimal differentiable kernels: tensors, a reverse-mode tape, MLP and GRU
//! layers, Adam, seeded initialisation, and the finite-difference oracle used
//! to verify all of it.

mod adam;
mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, OptState};
pub use gradcheck::{finite_diff_gradients, max_rel_error, FD_STEP};
pub use layers::{
    gru_cell, gru_sequence, mlp_forward, stacked_gru_encode, BoundGru, BoundMlp, BoundParams,
};
pub use params::{param_specs, ModelConfig, ModelParams, ParamSpec, BIN_FEATURES, FLOW_FEATURES};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected width {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("backward requires a scalar loss, got length {0}")]
    GraphNotScalar(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
