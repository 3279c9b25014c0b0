//! Continuous 2-D pursuit: slow learned adversaries chase faster scripted prey.
//!
//! Entities `0..n_adversaries` are adversaries, the rest prey. Every entity
//! picks one of five accelerations (stay, up, down, left, right); velocity
//! is damped, pushed, clamped to the type's max speed, and integrated with
//! step `dt`. Positions are clamped to the square `[-half_width, half_width]²`.
//! Each (adversary, prey) pair within `capture_radius` after movement is a
//! capture event worth +10 to every adversary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, EnvError, MarkovGame, Step, StepInfo};
use crate::diffnet::Array;

pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;
pub const N_ACTIONS: usize = 5;
pub const CAPTURE_REWARD: f64 = 10.0;

const DIRECTIONS: [[f64; 2]; N_ACTIONS] = [[0.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0], [1.0, 0.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPConfig {
    pub n_adversaries: usize,
    pub n_prey: usize,
    pub half_width: f64,
    pub adversary_speed: f64,
    pub prey_speed: f64,
    pub damping: f64,
    pub dt: f64,
    pub capture_radius: f64,
    pub max_steps: usize,
    /// Weight of the `-distance to nearest prey` term; 0 disables it.
    pub shaping: f64,
    /// Probability that a prey takes a uniformly random action instead of fleeing.
    pub prey_noise: f64,
}

impl Default for PPConfig {
    fn default() -> Self {
        Self {
            n_adversaries: 5,
            n_prey: 2,
            half_width: 1.0,
            adversary_speed: 1.0,
            prey_speed: 1.3,
            damping: 0.5,
            dt: 0.1,
            capture_radius: 0.1,
            max_steps: 50,
            shaping: 0.0,
            prey_noise: 0.05,
        }
    }
}

impl PPConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.n_adversaries < 2 || self.n_prey < 1 {
            return err(format!("need at least 2 adversaries and 1 prey, got {}v{}", self.n_adversaries, self.n_prey));
        }
        for (name, v) in [
            ("half_width", self.half_width),
            ("adversary_speed", self.adversary_speed),
            ("prey_speed", self.prey_speed),
            ("dt", self.dt),
            ("capture_radius", self.capture_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.prey_speed <= self.adversary_speed {
            return err(format!(
                "prey speed {} must exceed adversary speed {}",
                self.prey_speed, self.adversary_speed
            ));
        }
        if !(0.0..=1.0).contains(&self.damping) || !(0.0..=1.0).contains(&self.prey_noise) {
            return err("damping and prey_noise must lie in [0,1]".into());
        }
        if self.max_steps == 0 || !self.shaping.is_finite() || self.shaping < 0.0 {
            return err("max_steps must be positive and shaping non-negative".into());
        }
        Ok(())
    }

    pub fn n_entities(&self) -> usize {
        self.n_adversaries + self.n_prey
    }

    pub fn obs_dim(&self) -> usize {
        4 + 2 * (self.n_entities() - 1) + 2 * self.n_prey
    }

    fn max_speed(&self, entity: usize) -> f64 {
        if entity < self.n_adversaries {
            self.adversary_speed
        } else {
            self.prey_speed
        }
    }

    /// Velocity and position after one step of `action` from `(p, v)`.
    /// The push is `max_speed` per step, so a single step from rest reaches top speed.
    pub fn integrate(&self, entity: usize, p: [f64; 2], v: [f64; 2], action: usize) -> ([f64; 2], [f64; 2]) {
        let max = self.max_speed(entity);
        let d = DIRECTIONS[action];
        let mut nv = [v[0] * (1.0 - self.damping) + max * d[0], v[1] * (1.0 - self.damping) + max * d[1]];
        let speed = (nv[0] * nv[0] + nv[1] * nv[1]).sqrt();
        if speed > max {
            nv = [nv[0] * max / speed, nv[1] * max / speed];
        }
        let w = self.half_width;
        let np = [(p[0] + nv[0] * self.dt).clamp(-w, w), (p[1] + nv[1] * self.dt).clamp(-w, w)];
        (np, nv)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PPState {
    pub step: usize,
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PPStepRecord {
    pub step: usize,
    pub actions: Vec<usize>,
    pub prey_actions: Vec<usize>,
    /// All entity positions after movement.
    pub positions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    /// `(adversary, prey)` pairs, prey indexed from 0.
    pub captures: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct PredatorPrey {
    config: PPConfig,
    state: PPState,
}

impl PredatorPrey {
    pub fn new(config: PPConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let n = config.n_entities();
        let state = PPState { step: 0, pos: vec![[0.0; 2]; n], vel: vec![[0.0; 2]; n], rng: ChaCha8Rng::seed_from_u64(0) };
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &PPConfig {
        &self.config
    }

    pub fn state(&self) -> &PPState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut PPState {
        &mut self.state
    }

    /// Flee action of prey `g` (0-based among prey): the action whose next
    /// position is farthest from the nearest current adversary position.
    /// Ties go to the lowest action index.
    pub fn flee_action(&self, g: usize) -> usize {
        let e = self.config.n_adversaries + g;
        let adversaries = &self.state.pos[..self.config.n_adversaries];
        let mut best = (STAY, f64::NEG_INFINITY);
        for a in 0..N_ACTIONS {
            let (np, _) = self.config.integrate(e, self.state.pos[e], self.state.vel[e], a);
            let d = adversaries.iter().map(|&q| dist(np, q)).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (a, d);
            }
        }
        best.0
    }

    /// Prey actions for the current state; consumes the state's rng.
    pub fn prey_policy(&mut self) -> Vec<usize> {
        (0..self.config.n_prey)
            .map(|g| {
                let flee = self.flee_action(g);
                if self.state.rng.gen::<f64>() < self.config.prey_noise {
                    self.state.rng.gen_range(0..N_ACTIONS)
                } else {
                    flee
                }
            })
            .collect()
    }

    /// Capture events for the current positions.
    pub fn captures(&self) -> Vec<(usize, usize)> {
        let na = self.config.n_adversaries;
        let mut out = Vec::new();
        for a in 0..na {
            for g in 0..self.config.n_prey {
                if dist(self.state.pos[a], self.state.pos[na + g]) <= self.config.capture_radius {
                    out.push((a, g));
                }
            }
        }
        out
    }

    /// Own position and velocity, positions of every other entity relative
    /// to self (adversaries then prey, by index), and prey velocities
    /// relative to own velocity.
    pub fn observe(&self, i: usize) -> Vec<f64> {
        let s = &self.state;
        let (p, v) = (s.pos[i], s.vel[i]);
        let mut obs = Vec::with_capacity(self.config.obs_dim());
        obs.extend([p[0], p[1], v[0], v[1]]);
        for (k, q) in s.pos.iter().enumerate() {
            if k != i {
                obs.extend([q[0] - p[0], q[1] - p[1]]);
            }
        }
        for u in &s.vel[self.config.n_adversaries..] {
            obs.extend([u[0] - v[0], u[1] - v[1]]);
        }
        obs
    }

    pub fn observations(&self) -> Array {
        let rows: Vec<Vec<f64>> = (0..self.config.n_adversaries).map(|i| self.observe(i)).collect();
        Array::from_rows(&rows)
    }

    pub fn reset_with(&mut self, seed: u64) -> (PPState, Array) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = self.config.half_width;
        let n = self.config.n_entities();
        let pos = (0..n).map(|_| [rng.gen_range(-w..=w), rng.gen_range(-w..=w)]).collect();
        self.state = PPState { step: 0, pos, vel: vec![[0.0; 2]; n], rng };
        (self.state.clone(), self.observations())
    }

    pub fn step_record(&mut self, actions: &[usize]) -> Result<PPStepRecord, EnvError> {
        let na = self.config.n_adversaries;
        check_actions(actions, na, N_ACTIONS)?;
        if self.state.step >= self.config.max_steps {
            return Err(EnvError::Action("episode already finished".into()));
        }
        let prey_actions = self.prey_policy();
        for e in 0..self.config.n_entities() {
            let a = if e < na { actions[e] } else { prey_actions[e - na] };
            let (np, nv) = self.config.integrate(e, self.state.pos[e], self.state.vel[e], a);
            self.state.pos[e] = np;
            self.state.vel[e] = nv;
        }
        let captures = self.captures();
        let shared = CAPTURE_REWARD * captures.len() as f64;
        let rewards = (0..na)
            .map(|a| {
                if self.config.shaping == 0.0 {
                    return shared;
                }
                let nearest = self.state.pos[na..].iter().map(|&q| dist(self.state.pos[a], q)).fold(f64::INFINITY, f64::min);
                shared - self.config.shaping * nearest
            })
            .collect();
        self.state.step += 1;
        Ok(PPStepRecord {
            step: self.state.step - 1,
            actions: actions.to_vec(),
            prey_actions,
            positions: self.state.pos.clone(),
            rewards,
            captures,
        })
    }
}

impl MarkovGame for PredatorPrey {
    fn n_agents(&self) -> usize {
        self.config.n_adversaries
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn reset(&mut self, seed: u64) -> Array {
        self.reset_with(seed).1
    }

    fn step(&mut self, actions: &[usize]) -> Result<Step, EnvError> {
        let rec = self.step_record(actions)?;
        Ok(Step {
            obs: self.observations(),
            rewards: rec.rewards,
            done: self.state.step >= self.config.max_steps,
            info: StepInfo { collisions: 0, spawns: 0, captures: rec.captures.len() },
        })
    }

    fn active(&self) -> Vec<bool> {
        vec![true; self.config.n_adversaries]
    }

    fn positions(&self) -> Vec<Option<[f64; 2]>> {
        self.state.pos.iter().map(|&p| Some(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PredatorPrey {
        PredatorPrey::new(PPConfig { prey_noise: 0.0, ..PPConfig::default() }).unwrap()
    }

    fn set(env: &mut PredatorPrey, pos: &[[f64; 2]]) {
        let n = env.config().n_entities();
        env.state_mut().pos = pos.to_vec();
        env.state_mut().vel = vec![[0.0; 2]; n];
        env.state_mut().step = 0;
    }

    fn far_layout() -> Vec<[f64; 2]> {
        vec![[-0.9, -0.9], [-0.9, -0.6], [-0.9, -0.3], [-0.9, 0.0], [-0.9, 0.3], [0.9, 0.9], [0.9, -0.9]]
    }

    #[test]
    fn sizes() {
        let env = quiet();
        assert_eq!(env.config().n_entities(), 7);
        assert_eq!(env.obs_dim(), 20);
        let mut env = env;
        let obs = env.reset(1);
        assert_eq!(obs.shape(), &[5, 20]);
    }

    #[test]
    fn reset_within_bounds_and_deterministic() {
        let mut a = quiet();
        let mut b = quiet();
        assert_eq!(a.reset(9), b.reset(9));
        for p in &a.state().pos {
            assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
        }
        assert!(a.state().vel.iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn invalid_config() {
        let cfg = PPConfig { prey_speed: 0.9, ..PPConfig::default() };
        assert!(PredatorPrey::new(cfg).is_err());
        let cfg = PPConfig { capture_radius: 0.0, ..PPConfig::default() };
        assert!(PredatorPrey::new(cfg).is_err());
    }

    #[test]
    fn no_capture_zero_reward() {
        let mut env = quiet();
        env.reset(0);
        set(&mut env, &far_layout());
        let s = env.step(&[STAY; 5]).unwrap();
        assert!(s.rewards.iter().all(|&r| r == 0.0));
        assert_eq!(s.info.captures, 0);
    }

    #[test]
    fn single_capture_is_shared() {
        let mut env = quiet();
        env.reset(0);
        let mut layout = far_layout();
        // Prey in a corner, pressed against the walls, adversary on top of it.
        layout[5] = [1.0, 1.0];
        layout[0] = [0.98, 0.98];
        set(&mut env, &layout);
        let s = env.step(&[DOWN, STAY, STAY, STAY, STAY]).unwrap();
        assert_eq!(s.info.captures, 1);
        assert!(s.rewards.iter().all(|&r| r == 10.0));
    }

    #[test]
    fn flee_from_left_goes_right() {
        let mut env = quiet();
        env.reset(0);
        let mut layout = vec![[-0.5, 0.0]; 5];
        layout.push([0.0, 0.0]);
        layout.push([0.5, 0.5]);
        set(&mut env, &layout);
        assert_eq!(env.flee_action(0), RIGHT);
    }

    #[test]
    fn symmetric_tie_lowest_index() {
        let mut env = quiet();
        env.reset(0);
        // Adversaries left and right: up and down tie, up has the lower index.
        let mut layout = vec![[-0.3, 0.0], [0.3, 0.0], [-0.3, 0.0], [0.3, 0.0], [-0.3, 0.0]];
        layout[4] = [0.3, 0.0];
        layout.push([0.0, 0.0]);
        layout.push([0.9, 0.9]);
        set(&mut env, &layout);
        assert_eq!(env.flee_action(0), UP);
    }

    #[test]
    fn speed_clamped() {
        let mut env = quiet();
        env.reset(4);
        for t in 0..50 {
            env.step(&[(t % 4) + 1; 5]).unwrap();
            for (e, v) in env.state().vel.iter().enumerate() {
                let max = env.config().max_speed(e);
                assert!((v[0] * v[0] + v[1] * v[1]).sqrt() <= max + 1e-12);
            }
        }
        assert!(env.step(&[STAY; 5]).is_err());
    }

    #[test]
    fn co_located_adversaries_look_alike() {
        let mut env = quiet();
        env.reset(0);
        let mut layout = far_layout();
        layout[1] = layout[2];
        set(&mut env, &layout);
        let o = env.observe(0);
        // Blocks for entities 1 and 2 in agent 0's view.
        assert_eq!(o[4..6], o[6..8]);
    }

    #[test]
    fn own_position_not_repeated() {
        let mut env = quiet();
        env.reset(2);
        let o = env.observe(3);
        let s = env.state();
        let expected = [s.pos[4][0] - s.pos[3][0], s.pos[4][1] - s.pos[3][1]];
        // Entities 0,1,2 then 4: entity 4 occupies the fourth relative block.
        assert_eq!(o[10..12], expected);
    }
}
