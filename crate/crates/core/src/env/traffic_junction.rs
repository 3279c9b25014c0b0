//! Traffic junction gridworld.
//!
//! Cars enter at the start of one-way lanes, follow a fixed route, and leave
//! at the grid edge. Each step every active car either moves one cell along
//! its route (gas) or stays (brake). Cars that share a cell after movement
//! have collided. Reward per active car is `-0.01·τ` with `τ` the number of
//! steps since it entered, plus `-10` if it is in a collision.
//!
//! The learner sees a fixed set of `n_max` slots; empty slots observe a
//! zero vector and their actions are ignored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_actions, EnvError, MarkovGame, Step, StepInfo};
use crate::diffnet::Array;

pub const GAS: usize = 0;
pub const BRAKE: usize = 1;
pub const TIME_PENALTY: f64 = -0.01;
pub const COLLISION_PENALTY: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    /// Two crossing one-way roads, straight routes only.
    Easy,
    /// Two crossing two-way roads with turns.
    Medium,
    /// Two-by-two two-way roads, four junctions, turns.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TJConfig {
    pub difficulty: Difficulty,
    pub dim: usize,
    pub n_max: usize,
    pub p_arrive: f64,
    pub max_steps: usize,
    #[serde(default)]
    pub vision: usize,
}

impl TJConfig {
    pub fn preset(difficulty: Difficulty) -> Self {
        match difficulty {
            Difficulty::Easy => Self { difficulty, dim: 7, n_max: 5, p_arrive: 0.3, max_steps: 20, vision: 0 },
            Difficulty::Medium => Self { difficulty, dim: 14, n_max: 10, p_arrive: 0.2, max_steps: 40, vision: 0 },
            Difficulty::Hard => Self { difficulty, dim: 18, n_max: 20, p_arrive: 0.05, max_steps: 80, vision: 0 },
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let min_dim = match self.difficulty {
            Difficulty::Easy => 3,
            Difficulty::Medium => 4,
            Difficulty::Hard => 9,
        };
        if self.dim < min_dim {
            return Err(EnvError::Config(format!("dim {} too small for {:?}", self.dim, self.difficulty)));
        }
        if self.n_max < 2 {
            return Err(EnvError::Config(format!("n_max must be at least 2, got {}", self.n_max)));
        }
        if !(0.0..1.0).contains(&self.p_arrive) {
            return Err(EnvError::Config(format!("p_arrive must lie in [0,1), got {}", self.p_arrive)));
        }
        if self.max_steps == 0 {
            return Err(EnvError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Lane {
    horizontal: bool,
    /// Row of a horizontal lane, column of a vertical one.
    fixed: usize,
    /// Travels towards increasing coordinates.
    increasing: bool,
}

impl Lane {
    fn cells(&self, dim: usize) -> Vec<(usize, usize)> {
        let along: Vec<usize> = if self.increasing { (0..dim).collect() } else { (0..dim).rev().collect() };
        along.into_iter().map(|k| if self.horizontal { (self.fixed, k) } else { (k, self.fixed) }).collect()
    }
}

fn lanes(difficulty: Difficulty, dim: usize) -> Vec<Lane> {
    let h = |fixed, increasing| Lane { horizontal: true, fixed, increasing };
    let v = |fixed, increasing| Lane { horizontal: false, fixed, increasing };
    match difficulty {
        Difficulty::Easy => vec![h(dim / 2, true), v(dim / 2, true)],
        Difficulty::Medium => {
            let c = dim / 2;
            vec![h(c, true), h(c - 1, false), v(c - 1, true), v(c, false)]
        }
        Difficulty::Hard => {
            let mut out = Vec::new();
            for c in [dim / 3, 2 * dim / 3] {
                out.extend([h(c, true), h(c - 1, false), v(c - 1, true), v(c, false)]);
            }
            out
        }
    }
}

/// Cell sequence and entry lane of one route.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub entry: usize,
    pub cells: Vec<(usize, usize)>,
}

/// Every route of a layout: for each entry lane the straight route, then
/// (with turns enabled) one turn onto each perpendicular lane in lane order.
pub fn route_table(difficulty: Difficulty, dim: usize) -> Vec<Route> {
    let all = lanes(difficulty, dim);
    let turns = difficulty != Difficulty::Easy;
    let mut routes = Vec::new();
    for (e, lane) in all.iter().enumerate() {
        routes.push(Route { entry: e, cells: lane.cells(dim) });
        if !turns {
            continue;
        }
        for exit in all.iter().filter(|l| l.horizontal != lane.horizontal) {
            let cross = if lane.horizontal { (lane.fixed, exit.fixed) } else { (exit.fixed, lane.fixed) };
            let mut cells: Vec<_> = lane.cells(dim).into_iter().take_while(|&c| c != cross).collect();
            cells.push(cross);
            cells.extend(exit.cells(dim).into_iter().skip_while(|&c| c != cross).skip(1));
            routes.push(Route { entry: e, cells });
        }
    }
    routes
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Car {
    pub active: bool,
    pub route: usize,
    pub progress: usize,
    pub cell: (usize, usize),
    /// Steps since the car entered; 1 on its first step.
    pub tau: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TJState {
    pub step: usize,
    pub cars: Vec<Car>,
    pub rng: ChaCha8Rng,
    pub collisions: usize,
}

/// Everything that happened in one step, in loggable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TJStepRecord {
    pub step: usize,
    pub actions: Vec<usize>,
    /// `τ` of each slot when the step began (0 for empty slots).
    pub taus: Vec<u32>,
    /// Cell after movement; `None` for empty slots and cars that left.
    pub positions: Vec<Option<(usize, usize)>>,
    pub collided: Vec<bool>,
    pub rewards: Vec<f64>,
    pub spawns: usize,
}

#[derive(Clone, Debug)]
pub struct TrafficJunction {
    config: TJConfig,
    routes: Vec<Route>,
    entries: Vec<Vec<usize>>,
    state: TJState,
}

impl TrafficJunction {
    pub fn new(config: TJConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let routes = route_table(config.difficulty, config.dim);
        let n_entries = lanes(config.difficulty, config.dim).len();
        let mut entries = vec![Vec::new(); n_entries];
        for (k, r) in routes.iter().enumerate() {
            entries[r.entry].push(k);
        }
        let state = TJState {
            step: 0,
            cars: vec![Car::default(); config.n_max],
            rng: ChaCha8Rng::seed_from_u64(0),
            collisions: 0,
        };
        Ok(Self { config, routes, entries, state })
    }

    pub fn config(&self) -> &TJConfig {
        &self.config
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn state(&self) -> &TJState {
        &self.state
    }

    /// Mutable access for constructing hand-made situations in tests.
    pub fn state_mut(&mut self) -> &mut TJState {
        &mut self.state
    }

    fn patch_width(&self) -> usize {
        if self.config.vision == 0 {
            0
        } else {
            (2 * self.config.vision + 1).pow(2)
        }
    }

    /// Observation of slot `i`: one-hot cell, one-hot route, active flag,
    /// and (with vision > 0) counts of other cars in the surrounding patch.
    pub fn observe(&self, i: usize) -> Vec<f64> {
        let dim = self.config.dim;
        let mut obs = vec![0.0; self.obs_dim()];
        let car = &self.state.cars[i];
        if !car.active {
            return obs;
        }
        obs[car.cell.0 * dim + car.cell.1] = 1.0;
        obs[dim * dim + car.route] = 1.0;
        obs[dim * dim + self.routes.len()] = 1.0;
        if self.config.vision > 0 {
            let v = self.config.vision as isize;
            let side = 2 * v + 1;
            let base = dim * dim + self.routes.len() + 1;
            for (k, other) in self.state.cars.iter().enumerate() {
                if k == i || !other.active {
                    continue;
                }
                let dr = other.cell.0 as isize - car.cell.0 as isize;
                let dc = other.cell.1 as isize - car.cell.1 as isize;
                if dr.abs() <= v && dc.abs() <= v {
                    obs[base + ((dr + v) * side + dc + v) as usize] += 1.0;
                }
            }
        }
        obs
    }

    pub fn observations(&self) -> Array {
        let rows: Vec<Vec<f64>> = (0..self.config.n_max).map(|i| self.observe(i)).collect();
        Array::from_rows(&rows)
    }

    fn spawn(&mut self) -> usize {
        let mut spawned = 0;
        for e in 0..self.entries.len() {
            if !self.state.rng.gen_bool(self.config.p_arrive) {
                continue;
            }
            let Some(slot) = self.state.cars.iter().position(|c| !c.active) else { continue };
            let options = &self.entries[e];
            let route = options[self.state.rng.gen_range(0..options.len())];
            self.state.cars[slot] =
                Car { active: true, route, progress: 0, cell: self.routes[route].cells[0], tau: 1 };
            spawned += 1;
        }
        spawned
    }

    /// Starts an episode and returns the reset state's observations.
    pub fn reset_with(&mut self, seed: u64) -> (TJState, Array) {
        self.state = TJState {
            step: 0,
            cars: vec![Car::default(); self.config.n_max],
            rng: ChaCha8Rng::seed_from_u64(seed),
            collisions: 0,
        };
        if self.config.p_arrive > 0.0 {
            self.spawn();
        }
        (self.state.clone(), self.observations())
    }

    /// Advances one step and returns the full record.
    pub fn step_record(&mut self, actions: &[usize]) -> Result<TJStepRecord, EnvError> {
        let n = self.config.n_max;
        check_actions(actions, n, 2)?;
        if self.state.step >= self.config.max_steps {
            return Err(EnvError::Action("episode already finished".into()));
        }
        let taus: Vec<u32> = self.state.cars.iter().map(|c| if c.active { c.tau } else { 0 }).collect();
        let mut positions = vec![None; n];
        let mut exited = vec![false; n];
        for (i, car) in self.state.cars.iter_mut().enumerate() {
            if !car.active {
                continue;
            }
            if actions[i] == GAS {
                car.progress += 1;
                let cells = &self.routes[car.route].cells;
                if car.progress >= cells.len() {
                    exited[i] = true;
                    continue;
                }
                car.cell = cells[car.progress];
            }
            positions[i] = Some(car.cell);
        }
        let mut collided = vec![false; n];
        for i in 0..n {
            for j in i + 1..n {
                if positions[i].is_some() && positions[i] == positions[j] {
                    collided[i] = true;
                    collided[j] = true;
                }
            }
        }
        let mut rewards = vec![0.0; n];
        for i in 0..n {
            if taus[i] == 0 {
                continue;
            }
            rewards[i] = TIME_PENALTY * f64::from(taus[i]);
            if collided[i] {
                rewards[i] += COLLISION_PENALTY;
            }
        }
        let n_collided = collided.iter().filter(|&&c| c).count();
        self.state.collisions += n_collided;
        for (i, car) in self.state.cars.iter_mut().enumerate() {
            if exited[i] {
                *car = Car::default();
            } else if car.active {
                car.tau += 1;
            }
        }
        self.state.step += 1;
        let spawns = if self.state.step < self.config.max_steps && self.config.p_arrive > 0.0 {
            self.spawn()
        } else {
            0
        };
        Ok(TJStepRecord { step: self.state.step - 1, actions: actions.to_vec(), taus, positions, collided, rewards, spawns })
    }
}

impl MarkovGame for TrafficJunction {
    fn n_agents(&self) -> usize {
        self.config.n_max
    }

    fn obs_dim(&self) -> usize {
        self.config.dim * self.config.dim + self.routes.len() + 1 + self.patch_width()
    }

    fn n_actions(&self) -> usize {
        2
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
            info: StepInfo {
                collisions: rec.collided.iter().filter(|&&c| c).count(),
                spawns: rec.spawns,
                captures: 0,
            },
        })
    }

    fn active(&self) -> Vec<bool> {
        self.state.cars.iter().map(|c| c.active).collect()
    }

    fn positions(&self) -> Vec<Option<[f64; 2]>> {
        self.state.cars.iter().map(|c| c.active.then_some([c.cell.0 as f64, c.cell.1 as f64])).collect()
    }

    fn fresh(&self) -> Vec<bool> {
        self.state.cars.iter().map(|c| c.active && c.tau == 1).collect()
    }
}

/// True iff no step of the episode had a collision.
pub fn episode_success(collision_log: &[usize]) -> bool {
    collision_log.iter().all(|&c| c == 0)
}
