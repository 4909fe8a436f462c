//! Minimal dense tensors with reverse-mode differentiation, the attention
//! primitive and an Adam optimizer.

mod adam;
pub mod functional;
mod graph;
pub mod layers;
mod params;
mod scalar;
mod tensor;

use thiserror::Error;

pub use adam::Adam;
pub use functional::{scaled_dot_attention, softmax, AttentionOutput, AttentionShape};
pub use graph::{Graph, Var};
pub use layers::Init;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("no gradients available: run backward first")]
    NoBackward,
    #[error("every label is ignored; nothing to score")]
    NoTargets,
}
