//! Minimal differentiable-computation core: arrays, parameter stores, a
//! reverse-mode tape, the layers the agents are built from, and an Adam
//! optimizer.

mod array;
pub mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;

pub(crate) use array::gemm;
pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Activation, BiLstm, Linear, Lstm, Mlp};
pub use optim::{Adam, AdamConfig, OptimState};
pub use params::{Gradients, Init, ParamEntry, ParamId, ParamStore};
pub use tape::{gumbel_noise, sample_gumbel, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gumbel-softmax temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("optimizer state does not match parameter store: {0}")]
    OptimizerLayout(String),
}

/// Forward behaviour of the Gumbel-softmax gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Continuous relaxed sample.
    Relaxed,
    /// Exact one-hot forward, relaxed gradient backward.
    #[default]
    StraightThrough,
}
