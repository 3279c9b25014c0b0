//! Markov-game environments: a fixed set of agents, per-agent observations
//! and rewards, discrete joint actions.

pub mod predator_prey;
pub mod traffic_junction;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::Array;

pub use predator_prey::{PPConfig, PredatorPrey};
pub use traffic_junction::{Difficulty, TJConfig, TrafficJunction};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("malformed joint action: {0}")]
    Action(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Cars involved in a collision this step.
    pub collisions: usize,
    /// Cars that entered the road this step.
    pub spawns: usize,
    /// (adversary, prey) pairs within capture radius this step.
    pub captures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// `[n_agents, obs_dim]`.
    pub obs: Array,
    pub rewards: Vec<f64>,
    /// Episode over (time limit reached).
    pub done: bool,
    pub info: StepInfo,
}

/// Common surface the learners drive.
pub trait MarkovGame {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Starts a new episode; returns `[n_agents, obs_dim]` observations.
    fn reset(&mut self, seed: u64) -> Array;
    fn step(&mut self, actions: &[usize]) -> Result<Step, EnvError>;
    /// Agents currently taking part (all of them for always-on games).
    fn active(&self) -> Vec<bool>;
    /// Per-agent world position for logs and attention overlays.
    fn positions(&self) -> Vec<Option<[f64; 2]>>;
    /// Slots whose occupant started its life this step; recurrent state
    /// and returns are cut there.
    fn fresh(&self) -> Vec<bool> {
        vec![false; self.n_agents()]
    }
}

pub(crate) fn check_actions(actions: &[usize], n: usize, n_actions: usize) -> Result<(), EnvError> {
    if actions.len() != n {
        return Err(EnvError::Action(format!("expected {n} actions, got {}", actions.len())));
    }
    if let Some((i, a)) = actions.iter().enumerate().find(|(_, &a)| a >= n_actions) {
        return Err(EnvError::Action(format!("agent {i}: action {a} out of range 0..{n_actions}")));
    }
    Ok(())
}
