//! Communicating recurrent policy trained with REINFORCE.
//!
//! Per step and agent: `e_i = enc(o_i)`, `(h_i, c_i) = LSTM(e_i, h_i, c_i)`,
//! `x_i` from the attention block over all `h` (queries, keys and values are
//! the LSTM outputs), then an action head and a baseline head on `[h_i, x_i]`.
//! All parameters are shared across agents. `x_i` is not fed back into the
//! LSTM.
//!
//! Several episodes are simulated in lock-step and processed as independent
//! groups on one tape, which is reused for the update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, Adam, AdamConfig, Array, GateMode, Linear, Lstm, Mlp, ParamStore, Tape, Var};
use crate::env::MarkovGame;
use crate::g2anet::{AgentGraph, Aggregator, AttentionConfig, AttentionInput, AttentionOutput, Gate, GameAbstraction};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommConfig {
    pub encoder_hidden: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub attention: AttentionConfig,
    pub aggregator: Aggregator,
    pub gate_mode: GateMode,
    pub temperature: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 128,
            lstm_hidden: 128,
            head_hidden: 128,
            attention: AttentionConfig::default(),
            aggregator: Aggregator::TwoStage,
            gate_mode: GateMode::StraightThrough,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinforceConfig {
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub batch_episodes: usize,
    /// Rescale advantages of the batch to zero mean and unit variance.
    pub normalize_advantages: bool,
    pub adam: AdamConfig,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self { gamma: 1.0, entropy_coef: 0.01, value_coef: 0.5, batch_episodes: 16, normalize_advantages: false, adam: AdamConfig::default() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Var,
}

/// Tape handles produced by one policy step over `groups * n` rows.
#[derive(Clone, Debug)]
pub struct StepVars {
    /// `[rows, n_actions]` log-probabilities.
    pub logp: Var,
    /// `[rows, 1]` baseline.
    pub value: Var,
    pub attention: AttentionOutput,
    pub state: RecurrentState,
}

/// One policy input: observations of every row plus liveness flags.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub obs: &'a Array,
    pub n: usize,
    pub alive: &'a [bool],
    /// Rows whose occupant is new; their recurrent state is reset.
    pub fresh: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct CommPolicy {
    pub config: CommConfig,
    pub store: ParamStore,
    pub obs_dim: usize,
    pub n_actions: usize,
    encoder: Mlp,
    lstm: Lstm,
    attention: GameAbstraction,
    head: Mlp,
    baseline: Linear,
}

impl CommPolicy {
    pub fn new(config: CommConfig, obs_dim: usize, n_actions: usize, seed: u64) -> Result<Self, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let he = config.encoder_hidden;
        let hl = config.lstm_hidden;
        let encoder = Mlp::new(&mut store, "enc", &[obs_dim, he], Activation::Tanh, Activation::Tanh, &mut rng)?;
        let lstm = Lstm::new(&mut store, "lstm", he, hl, &mut rng)?;
        let attention = GameAbstraction::new(&mut store, "att", hl, &config.attention, config.aggregator, &mut rng)?;
        let head = Mlp::new(
            &mut store,
            "head",
            &[2 * hl, config.head_hidden, n_actions],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        let baseline = Linear::new(&mut store, "value", 2 * hl, 1, &mut rng)?;
        Ok(Self { config, store, obs_dim, n_actions, encoder, lstm, attention, head, baseline })
    }

    pub fn gate(&self) -> Gate {
        Gate { mode: self.config.gate_mode, temperature: self.config.temperature }
    }

    pub fn initial_state(&self, tape: &mut Tape, rows: usize) -> RecurrentState {
        let (h, c) = self.lstm.zero_state(tape, rows);
        RecurrentState { h, c }
    }

    /// One step for every row. `hard_override` fixes the hard gate (pair
    /// order) instead of sampling it.
    pub fn step_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: StepInput<'_>,
        state: RecurrentState,
        rng: &mut R,
        hard_override: Option<&[f64]>,
    ) -> Result<StepVars, Error> {
        let rows = input.obs.rows();
        if input.obs.cols() != self.obs_dim || input.alive.len() != rows || input.fresh.len() != rows {
            return Err(Error::Shape(format!(
                "policy input {:?} with {} alive / {} fresh flags, obs width {}",
                input.obs.shape(),
                input.alive.len(),
                input.fresh.len(),
                self.obs_dim
            )));
        }
        let keep: Vec<f64> =
            input.alive.iter().zip(input.fresh).map(|(&a, &f)| if a && !f { 1.0 } else { 0.0 }).collect();
        let keep = tape.constant(Array::matrix(rows, 1, keep));
        let h = tape.mul_col(state.h, keep);
        let c = tape.mul_col(state.c, keep);
        let obs = tape.constant(input.obs.clone());
        let e = self.encoder.forward(tape, store, obs)?;
        let (h, c) = self.lstm.step(tape, store, e, h, c)?;
        let attention = self.attention.forward(
            tape,
            store,
            AttentionInput { query: h, key: h, value: h, n: input.n, alive: Some(input.alive), hard_override },
            self.gate(),
            rng,
        )?;
        let z = tape.concat_cols(&[h, attention.x]);
        let logits = self.head.forward(tape, store, z)?;
        let logp = tape.log_softmax_rows(logits);
        let value = self.baseline.forward(tape, store, z)?;
        Ok(StepVars { logp, value, attention, state: RecurrentState { h, c } })
    }

    /// Runs every env for one full episode in lock-step. Env `g` is reset
    /// with `seeds[g]`; gate noise comes from `gate_seed`, action sampling
    /// from `action_rng`. With `explore = false` actions are the argmax,
    /// lowest index on ties.
    pub fn rollout<E: MarkovGame>(
        &self,
        envs: &mut [E],
        seeds: &[u64],
        gate_seed: u64,
        action_rng: &mut ChaCha8Rng,
        explore: bool,
    ) -> Result<Rollout, Error> {
        let groups = envs.len();
        if groups == 0 || seeds.len() != groups {
            return Err(Error::Config("rollout needs one seed per env and at least one env".into()));
        }
        let n = envs[0].n_agents();
        let horizon = envs[0].max_steps();
        if envs.iter().any(|e| e.n_agents() != n || e.max_steps() != horizon) {
            return Err(Error::Config("envs in one rollout must agree on agents and horizon".into()));
        }
        let rows = groups * n;
        let mut obs_parts: Vec<Array> = envs.iter_mut().zip(seeds).map(|(e, &s)| e.reset(s)).collect();
        let mut tape = Tape::new();
        let mut gate_rng = ChaCha8Rng::seed_from_u64(gate_seed);
        let mut state = self.initial_state(&mut tape, rows);
        let mut vars = Vec::with_capacity(horizon);
        let mut steps = Vec::with_capacity(horizon);
        loop {
            let obs = stack(&obs_parts);
            let alive: Vec<bool> = envs.iter().flat_map(|e| e.active()).collect();
            let fresh: Vec<bool> = envs.iter().flat_map(|e| e.fresh()).collect();
            let sv = self.step_forward(
                &mut tape,
                &self.store,
                StepInput { obs: &obs, n, alive: &alive, fresh: &fresh },
                state,
                &mut gate_rng,
                None,
            )?;
            state = sv.state;
            let logp = tape.value(sv.logp);
            let actions: Vec<usize> = (0..rows)
                .map(|r| {
                    let row = logp.row_slice(r);
                    if explore {
                        sample_categorical(row, action_rng)
                    } else {
                        argmax(row)
                    }
                })
                .collect();
            let mut rewards = Vec::with_capacity(rows);
            let mut collisions = Vec::with_capacity(groups);
            let mut done = false;
            obs_parts.clear();
            for (g, env) in envs.iter_mut().enumerate() {
                let st = env.step(&actions[g * n..(g + 1) * n])?;
                rewards.extend_from_slice(&st.rewards);
                collisions.push(st.info.collisions);
                done |= st.done;
                obs_parts.push(st.obs);
            }
            let density = (0..groups).map(|g| candidate_density(&tape, &sv.attention, g)).collect();
            steps.push(StepRecord { obs, alive, fresh, actions, rewards, collisions, density });
            vars.push(sv);
            if done {
                break;
            }
        }
        Ok(Rollout { tape, vars, record: BatchRecord { n, groups, gate_seed, steps } })
    }

    /// Recomputes the forward pass of a recorded batch on `tape` with
    /// `store`. With the same parameters the values match the rollout
    /// exactly.
    pub fn replay(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        record: &BatchRecord,
        hard_override: Option<&[f64]>,
    ) -> Result<Vec<StepVars>, Error> {
        let mut gate_rng = ChaCha8Rng::seed_from_u64(record.gate_seed);
        let mut state = self.initial_state(tape, record.groups * record.n);
        let mut out = Vec::with_capacity(record.steps.len());
        for s in &record.steps {
            let sv = self.step_forward(
                tape,
                store,
                StepInput { obs: &s.obs, n: record.n, alive: &s.alive, fresh: &s.fresh },
                state,
                &mut gate_rng,
                hard_override,
            )?;
            state = sv.state;
            out.push(sv);
        }
        Ok(out)
    }

    /// REINFORCE loss with learned baseline and entropy bonus, averaged
    /// over live agent-steps. `None` if the batch has no live agent-step.
    pub fn loss(
        &self,
        tape: &mut Tape,
        vars: &[StepVars],
        record: &BatchRecord,
        cfg: &ReinforceConfig,
    ) -> Result<Option<(Var, LossStats)>, Error> {
        self.loss_with_baseline(tape, vars, record, cfg, None)
    }

    /// Same as [`CommPolicy::loss`]; `baseline`, if given, replaces the
    /// baseline values used in the (non-differentiated) advantage.
    pub fn loss_with_baseline(
        &self,
        tape: &mut Tape,
        vars: &[StepVars],
        record: &BatchRecord,
        cfg: &ReinforceConfig,
        baseline: Option<&[f64]>,
    ) -> Result<Option<(Var, LossStats)>, Error> {
        let returns = record.returns(cfg.gamma);
        let mask: Vec<f64> =
            record.steps.iter().flat_map(|s| s.alive.iter().map(|&a| if a { 1.0 } else { 0.0 })).collect();
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Ok(None);
        }
        let total = mask.len();
        let mut picked = Vec::with_capacity(vars.len());
        let mut values = Vec::with_capacity(vars.len());
        let mut logps = Vec::with_capacity(vars.len());
        for (sv, s) in vars.iter().zip(&record.steps) {
            picked.push(tape.pick_cols(sv.logp, &s.actions));
            values.push(sv.value);
            logps.push(sv.logp);
        }
        let picked = tape.concat_rows(&picked);
        let values = tape.concat_rows(&values);
        let logps = tape.concat_rows(&logps);
        let baseline = match baseline {
            Some(b) if b.len() == total => b.to_vec(),
            Some(b) => return Err(Error::Shape(format!("{} baseline values for {total} entries", b.len()))),
            None => tape.value(values).data().to_vec(),
        };
        let mut adv: Vec<f64> = (0..total).map(|k| mask[k] * (returns[k] - baseline[k])).collect();
        if cfg.normalize_advantages {
            let mean = adv.iter().sum::<f64>() / count;
            let var = adv.iter().zip(&mask).map(|(a, m)| m * (a - mean).powi(2)).sum::<f64>() / count;
            let sd = var.sqrt().max(1e-8);
            for (a, m) in adv.iter_mut().zip(&mask) {
                *a = m * (*a - mean) / sd;
            }
        }
        let adv = tape.constant(Array::matrix(total, 1, adv));
        let ret = tape.constant(Array::matrix(total, 1, returns));
        let mask = tape.constant(Array::matrix(total, 1, mask));

        let pg = tape.mul(picked, adv);
        let pg = tape.sum_all(pg);
        let pg = tape.neg(pg);
        let err = tape.sub(values, ret);
        let sq = tape.square(err);
        let sq = tape.mul(sq, mask);
        let vloss = tape.sum_all(sq);
        let probs = tape.exp(logps);
        let plogp = tape.mul(probs, logps);
        let ent = tape.sum_cols(plogp);
        let ent = tape.mul(ent, mask);
        let ent = tape.sum_all(ent);
        let ent = tape.neg(ent);

        let v = tape.scale(vloss, cfg.value_coef);
        let e = tape.scale(ent, -cfg.entropy_coef);
        let sum = tape.add(pg, v);
        let sum = tape.add(sum, e);
        let loss = tape.scale(sum, 1.0 / count);
        let stats = LossStats {
            loss: tape.scalar(loss),
            policy_loss: tape.scalar(pg) / count,
            value_loss: tape.scalar(vloss) / count,
            entropy: tape.scalar(ent) / count,
            agent_steps: count as usize,
        };
        Ok(Some((loss, stats)))
    }
}

fn stack(parts: &[Array]) -> Array {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|a| a.data().iter().copied()).collect();
    Array::matrix(data.len() / cols, cols, data)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Samples an index from a row of log-probabilities.
pub fn sample_categorical<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return k;
        }
    }
    logp.len() - 1
}

/// Fraction of candidate edges whose hard gate is on, `None` without
/// candidates.
fn candidate_density(tape: &Tape, att: &AttentionOutput, g: usize) -> Option<f64> {
    let m = att.n - 1;
    let span = g * att.n * m..(g + 1) * att.n * m;
    let cand = &att.candidate[span.clone()];
    let total = cand.iter().filter(|&&c| c).count();
    if total == 0 {
        return None;
    }
    let on = match att.hard {
        Some(h) => {
            let vals = &tape.value(h).data()[span];
            vals.iter().zip(cand).filter(|(&v, &c)| c && v > 0.5).count()
        }
        None => total,
    };
    Some(on as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: Array,
    pub alive: Vec<bool>,
    pub fresh: Vec<bool>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Collisions per group.
    pub collisions: Vec<usize>,
    /// Hard-gate density per group.
    pub density: Vec<Option<f64>>,
}

/// Everything needed to recompute a batch: inputs, actions, rewards and
/// the gate seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub n: usize,
    pub groups: usize,
    pub gate_seed: u64,
    pub steps: Vec<StepRecord>,
}

impl BatchRecord {
    pub fn rows(&self) -> usize {
        self.n * self.groups
    }

    /// Discounted returns in `(step, row)` order. A row's return is cut
    /// where its occupant leaves or is replaced; dead entries are 0.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let rows = self.rows();
        let t_len = self.steps.len();
        let mut out = vec![0.0; t_len * rows];
        for t in (0..t_len).rev() {
            let s = &self.steps[t];
            for r in 0..rows {
                if !s.alive[r] {
                    continue;
                }
                let next = if t + 1 < t_len {
                    let n = &self.steps[t + 1];
                    if n.alive[r] && !n.fresh[r] {
                        out[(t + 1) * rows + r]
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                out[t * rows + r] = s.rewards[r] + gamma * next;
            }
        }
        out
    }

    /// Per-group collision-free flag.
    pub fn successes(&self) -> Vec<bool> {
        (0..self.groups).map(|g| self.steps.iter().all(|s| s.collisions[g] == 0)).collect()
    }

    /// Per-group total reward divided by the agent count.
    pub fn episode_rewards(&self) -> Vec<f64> {
        (0..self.groups)
            .map(|g| {
                let total: f64 =
                    self.steps.iter().map(|s| s.rewards[g * self.n..(g + 1) * self.n].iter().sum::<f64>()).sum();
                total / self.n as f64
            })
            .collect()
    }

    pub fn mean_density(&self) -> Option<f64> {
        let vals: Vec<f64> = self.steps.iter().flat_map(|s| s.density.iter().flatten().copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// A batch of finished episodes together with the tape that produced it.
pub struct Rollout {
    pub tape: Tape,
    pub vars: Vec<StepVars>,
    pub record: BatchRecord,
}

impl Rollout {
    pub fn graph(&self, step: usize, group: usize) -> AgentGraph {
        self.vars[step].attention.graph(&self.tape, group)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub agent_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: LossStats,
    pub episodes: usize,
    pub env_steps: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub graph_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub graph_density: Option<f64>,
}

/// Policy, optimizer and the rng that drives episode seeds and sampling.
#[derive(Clone, Debug)]
pub struct CommTrainer {
    pub policy: CommPolicy,
    pub adam: Adam,
    pub config: ReinforceConfig,
    pub rng: ChaCha8Rng,
    pub updates: u64,
}

impl CommTrainer {
    pub fn new(policy: CommPolicy, config: ReinforceConfig, seed: u64) -> Self {
        let adam = Adam::new(config.adam.clone(), &policy.store);
        Self { policy, adam, config, rng: ChaCha8Rng::seed_from_u64(seed), updates: 0 }
    }

    /// Collects one batch on clones of `env` and applies one update.
    pub fn update<E: MarkovGame + Clone>(&mut self, env: &E) -> Result<UpdateStats, Error> {
        let b = self.config.batch_episodes.max(1);
        let mut envs = vec![env.clone(); b];
        let seeds: Vec<u64> = (0..b).map(|_| self.rng.gen()).collect();
        let gate_seed = self.rng.gen();
        let mut action_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
        let mut ro = self.policy.rollout(&mut envs, &seeds, gate_seed, &mut action_rng, true)?;
        let loss = self.policy.loss(&mut ro.tape, &ro.vars, &ro.record, &self.config)?;
        let stats = match loss {
            Some((l, stats)) => {
                let grads = ro.tape.gradients(l)?;
                self.policy.store.set_grads(&grads);
                self.adam.step(&mut self.policy.store)?;
                stats
            }
            None => LossStats::default(),
        };
        self.updates += 1;
        let succ = ro.record.successes();
        let rewards = ro.record.episode_rewards();
        Ok(UpdateStats {
            loss: stats,
            episodes: b,
            env_steps: b * ro.record.steps.len(),
            success_rate: succ.iter().filter(|&&s| s).count() as f64 / b as f64,
            mean_reward: rewards.iter().sum::<f64>() / b as f64,
            graph_density: ro.record.mean_density(),
        })
    }
}

/// Greedy evaluation on `episodes` episodes, batched 32 at a time. Depends
/// only on the parameters, `env` and `seed`.
pub fn evaluate<E: MarkovGame + Clone>(
    policy: &CommPolicy,
    env: &E,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    let mut reward = 0.0;
    let mut densities = Vec::new();
    let mut left = episodes;
    while left > 0 {
        let b = left.min(32);
        left -= b;
        let mut envs = vec![env.clone(); b];
        let seeds: Vec<u64> = (0..b).map(|_| rng.gen()).collect();
        let gate_seed = rng.gen();
        let mut action_rng = ChaCha8Rng::seed_from_u64(0);
        let ro = policy.rollout(&mut envs, &seeds, gate_seed, &mut action_rng, false)?;
        successes += ro.record.successes().iter().filter(|&&s| s).count();
        reward += ro.record.episode_rewards().iter().sum::<f64>();
        densities.extend(ro.record.mean_density());
    }
    let eps = episodes.max(1) as f64;
    Ok(EvalStats {
        episodes,
        success_rate: successes as f64 / eps,
        mean_reward: reward / eps,
        graph_density: (!densities.is_empty()).then(|| densities.iter().sum::<f64>() / densities.len() as f64),
    })
}
