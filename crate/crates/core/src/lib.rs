//! Multi-agent reinforcement learning with two-stage attention game
//! abstraction: a small reverse-mode autodiff core, the attention block,
//! two environments, and two learners (a communicating REINFORCE policy and
//! an actor-critic with an attention critic).

pub mod ac;
pub mod checks;
pub mod comm;
pub mod diffnet;
pub mod env;
pub mod g2anet;

use thiserror::Error;

pub use diffnet::{Array, DiffError, GateMode, ParamStore};
pub use env::{EnvError, MarkovGame};
pub use g2anet::{AgentGraph, Aggregator, AttentionConfig, Gate, GameAbstraction};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
