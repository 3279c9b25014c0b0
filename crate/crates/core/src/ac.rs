//! Off-policy actor-critic with a centralized attention critic.
//!
//! Actors are one shared MLP `o_i -> π_i(·|o_i)`. The critic of agent `i`
//! embeds every other agent's observation-action pair `e_j = g(o_j, a_j)`,
//! aggregates values `tanh(V e_j)` through the attention block with the
//! own-state embedding `s_i` as query, and maps `[s_i, x_i]` through a
//! per-agent head to one Q value per action of agent `i`.
//!
//! Targets bootstrap through a Polyak-averaged copy of the critic with the
//! exact expectation over the agent's own next action. The actor follows
//! the per-action advantage `Q(a) - Σ π(a')Q(a')` under the current policy.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{argmax, sample_categorical};
use crate::diffnet::{Activation, Adam, AdamConfig, Array, GateMode, Mlp, ParamId, ParamStore, Tape, Var};
use crate::env::MarkovGame;
use crate::g2anet::{Aggregator, AttentionConfig, AttentionInput, AttentionOutput, Gate, GameAbstraction};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcConfig {
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub attention: AttentionConfig,
    pub aggregator: Aggregator,
    pub gate_mode: GateMode,
    pub temperature: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Environment steps between updates.
    pub update_every: usize,
    pub entropy_coef: f64,
    pub actor_adam: AdamConfig,
    pub critic_adam: AdamConfig,
    /// With `false` the agent only acts; used as a null control.
    pub learn: bool,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            actor_hidden: 128,
            critic_hidden: 128,
            attention: AttentionConfig::default(),
            aggregator: Aggregator::TwoStage,
            gate_mode: GateMode::StraightThrough,
            temperature: 1.0,
            gamma: 0.95,
            polyak: 0.01,
            buffer_capacity: 100_000,
            batch_size: 256,
            update_every: 4,
            entropy_coef: 0.01,
            actor_adam: AdamConfig::default(),
            critic_adam: AdamConfig::default(),
            learn: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub net: Mlp,
    pub n_actions: usize,
}

impl Actor {
    pub fn new(store: &mut ParamStore, obs_dim: usize, hidden: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Result<Self, Error> {
        let net = Mlp::new(store, "actor", &[obs_dim, hidden, hidden, n_actions], Activation::Tanh, Activation::Identity, rng)?;
        Ok(Self { net, n_actions })
    }

    /// `[rows, n_actions]` log-probabilities.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, obs: Var) -> Result<Var, Error> {
        let logits = self.net.forward(tape, store, obs)?;
        Ok(tape.log_softmax_rows(logits))
    }

    /// Probabilities as plain values.
    pub fn probs(&self, store: &ParamStore, obs: &Array) -> Result<Array, Error> {
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let lp = self.log_probs(&mut tape, store, o)?;
        Ok(tape.value(lp).map(f64::exp))
    }
}

/// Critic output over `batch * n` rows.
#[derive(Clone, Debug)]
pub struct CriticOut {
    /// `[rows, n_actions]`.
    pub q: Var,
    pub attention: Option<AttentionOutput>,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub kind: Aggregator,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    state_enc: Mlp,
    pair_enc: Option<Mlp>,
    value: Option<ParamId>,
    attention: Option<GameAbstraction>,
    heads: Vec<Mlp>,
}

impl Critic {
    pub fn new(
        store: &mut ParamStore,
        n_agents: usize,
        obs_dim: usize,
        n_actions: usize,
        config: &AcConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, Error> {
        let h = config.critic_hidden;
        let kind = config.aggregator;
        let state_enc = Mlp::new(store, "critic.state", &[obs_dim, h], Activation::Tanh, Activation::Tanh, rng)?;
        let (pair_enc, value, attention) = if kind == Aggregator::None {
            (None, None, None)
        } else {
            let g = Mlp::new(store, "critic.embed", &[obs_dim + n_actions, h], Activation::Tanh, Activation::Tanh, rng)?;
            let v = store.init_uniform("critic.v", &[h, h], h, rng)?;
            let att = GameAbstraction::new(store, "critic.att", h, &config.attention, kind, rng)?;
            (Some(g), Some(v), Some(att))
        };
        let head_in = if kind == Aggregator::None { h } else { 2 * h };
        let heads = (0..n_agents)
            .map(|i| {
                Mlp::new(store, &format!("critic.head{i}"), &[head_in, h, n_actions], Activation::Tanh, Activation::Identity, rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { kind, n_agents, obs_dim, n_actions, state_enc, pair_enc, value, attention, heads })
    }

    /// Q vectors for every row of a batch of joint observations and actions
    /// laid out `(sample, agent)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        obs: &Array,
        actions: &[usize],
        gate: Gate,
        rng: &mut R,
        hard_override: Option<&[f64]>,
    ) -> Result<CriticOut, Error> {
        let n = self.n_agents;
        let rows = obs.rows();
        if !rows.is_multiple_of(n) || actions.len() != rows || obs.cols() != self.obs_dim {
            return Err(Error::Shape(format!(
                "critic input {:?} with {} actions for {n} agents",
                obs.shape(),
                actions.len()
            )));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.n_actions) {
            return Err(Error::Shape(format!("action {a} out of range")));
        }
        let batch = rows / n;
        let o = tape.constant(obs.clone());
        let s = self.state_enc.forward(tape, store, o)?;
        let (z, attention) = match (&self.pair_enc, &self.attention, self.value) {
            (Some(g), Some(att), Some(v)) => {
                let mut oa = Vec::with_capacity(rows * (self.obs_dim + self.n_actions));
                for (r, &a) in actions.iter().enumerate() {
                    oa.extend_from_slice(obs.row_slice(r));
                    oa.extend((0..self.n_actions).map(|k| if k == a { 1.0 } else { 0.0 }));
                }
                let oa = tape.constant(Array::matrix(rows, self.obs_dim + self.n_actions, oa));
                let e = g.forward(tape, store, oa)?;
                let vw = tape.param(store, v);
                let vals = tape.matmul(e, vw);
                let vals = tape.tanh(vals);
                let out = att.forward(
                    tape,
                    store,
                    AttentionInput { query: s, key: e, value: vals, n, alive: None, hard_override },
                    gate,
                    rng,
                )?;
                (tape.concat_cols(&[s, out.x]), Some(out))
            }
            _ => (s, None),
        };
        // Per-agent heads: gather each agent's rows, then restore row order.
        let mut parts = Vec::with_capacity(n);
        for (i, head) in self.heads.iter().enumerate() {
            let idx: Vec<usize> = (0..batch).map(|b| b * n + i).collect();
            let zi = tape.gather_rows(z, &idx);
            parts.push(head.forward(tape, store, zi)?);
        }
        let stacked = tape.concat_rows(&parts);
        let perm: Vec<usize> = (0..rows).map(|r| (r % n) * batch + r / n).collect();
        let q = tape.gather_rows(stacked, &perm);
        Ok(CriticOut { q, attention })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// `[n, obs_dim]`.
    pub obs: Array,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Array,
    pub done: bool,
}

/// Fixed-capacity ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), cursor: 0, inserted: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.inserted += 1;
    }

    /// Total number of pushes so far.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Distinct stored transitions, uniformly at random.
    pub fn sample<R: Rng>(&self, size: usize, rng: &mut R) -> Vec<&Transition> {
        let k = size.min(self.items.len());
        sample(rng, self.items.len(), k).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// A sampled minibatch flattened to `(sample, agent)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub obs: Array,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Array,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Result<Self, Error> {
        let first = items.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        let n = first.actions.len();
        let stack = |f: &dyn Fn(&Transition) -> &Array| {
            let cols = f(first).cols();
            let data: Vec<f64> = items.iter().flat_map(|t| f(t).data().iter().copied()).collect();
            Array::matrix(data.len() / cols, cols, data)
        };
        Ok(Self {
            n,
            obs: stack(&|t| &t.obs),
            actions: items.iter().flat_map(|t| t.actions.iter().copied()).collect(),
            rewards: items.iter().flat_map(|t| t.rewards.iter().copied()).collect(),
            next_obs: stack(&|t| &t.next_obs),
            done: items.iter().map(|t| t.done).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.done.len()
    }
}

/// `target <- (1 - rho) target + rho online`.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, rho: f64) -> Result<(), Error> {
    if !target.same_layout(online) {
        return Err(Error::Shape("target and online parameters differ in layout".into()));
    }
    for id in online.ids().collect::<Vec<_>>() {
        let src = online.value(id).clone();
        let dst = target.value_mut(id);
        for (t, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *t = (1.0 - rho) * *t + rho * s;
        }
    }
    Ok(())
}

/// `π(a) (Q(a) - Σ_a' π(a') Q(a'))` for every row and action.
pub fn advantage_weights(probs: &Array, q: &Array) -> Array {
    let base = counterfactual_baseline(probs, q);
    let (rows, a) = (probs.rows(), probs.cols());
    let mut w = Vec::with_capacity(rows * a);
    for (r, b) in base.iter().enumerate() {
        w.extend((0..a).map(|k| probs.get(r, k) * (q.get(r, k) - b)));
    }
    Array::matrix(rows, a, w)
}

/// `Σ_a π(a) Q(a)` per row.
pub fn counterfactual_baseline(probs: &Array, q: &Array) -> Vec<f64> {
    (0..probs.rows()).map(|r| probs.row_slice(r).iter().zip(q.row_slice(r)).map(|(p, v)| p * v).sum()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcUpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub graph_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_adversary_reward: f64,
    pub graph_density: Option<f64>,
    pub critic_loss: f64,
}

/// Actor, online and target critic, their optimizers, the replay buffer,
/// and the rng that drives exploration, sampling and gates.
#[derive(Clone, Debug)]
pub struct AcAgent {
    pub config: AcConfig,
    pub actor: Actor,
    pub critic: Critic,
    pub actor_store: ParamStore,
    pub critic_store: ParamStore,
    pub target_store: ParamStore,
    pub actor_adam: Adam,
    pub critic_adam: Adam,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub updates: u64,
}

impl AcAgent {
    pub fn new(config: AcConfig, n_agents: usize, obs_dim: usize, n_actions: usize, seed: u64) -> Result<Self, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_store = ParamStore::new();
        let actor = Actor::new(&mut actor_store, obs_dim, config.actor_hidden, n_actions, &mut rng)?;
        let mut critic_store = ParamStore::new();
        let critic = Critic::new(&mut critic_store, n_agents, obs_dim, n_actions, &config, &mut rng)?;
        let target_store = critic_store.clone();
        let actor_adam = Adam::new(config.actor_adam.clone(), &actor_store);
        let critic_adam = Adam::new(config.critic_adam.clone(), &critic_store);
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        Ok(Self {
            config,
            actor,
            critic,
            actor_store,
            critic_store,
            target_store,
            actor_adam,
            critic_adam,
            buffer,
            rng,
            env_steps: 0,
            updates: 0,
        })
    }

    pub fn gate(&self) -> Gate {
        Gate { mode: self.config.gate_mode, temperature: self.config.temperature }
    }

    /// Samples (or, with `explore = false`, takes the argmax of) each
    /// agent's action.
    pub fn act<R: Rng>(&self, obs: &Array, explore: bool, rng: &mut R) -> Result<Vec<usize>, Error> {
        let probs = self.actor.probs(&self.actor_store, obs)?;
        Ok((0..probs.rows())
            .map(|r| {
                let row = probs.row_slice(r);
                if explore {
                    let lp: Vec<f64> = row.iter().map(|p| p.ln()).collect();
                    sample_categorical(&lp, rng)
                } else {
                    argmax(row)
                }
            })
            .collect())
    }

    /// `y_i = r_i + γ (1 - done) Σ_a π_i(a|o'_i) Q̄_i(o', a, â'_{-i})` with
    /// `â'` sampled from the current actors. Uses the target critic only.
    pub fn td_targets<R: Rng>(&self, batch: &Batch, rng: &mut R) -> Result<Vec<f64>, Error> {
        let probs = self.actor.probs(&self.actor_store, &batch.next_obs)?;
        let next_actions: Vec<usize> = (0..probs.rows())
            .map(|r| {
                let lp: Vec<f64> = probs.row_slice(r).iter().map(|p| p.ln()).collect();
                sample_categorical(&lp, rng)
            })
            .collect();
        let mut tape = Tape::new();
        let out = self.critic.forward(&mut tape, &self.target_store, &batch.next_obs, &next_actions, self.gate(), rng, None)?;
        let expected = counterfactual_baseline(&probs, tape.value(out.q));
        Ok((0..batch.rewards.len())
            .map(|r| {
                let cont = if batch.done[r / batch.n] { 0.0 } else { 1.0 };
                batch.rewards[r] + self.config.gamma * cont * expected[r]
            })
            .collect())
    }

    /// `Σ_i mean_b (Q_i(o, a) - y_i)²` on `tape` with critic parameters `store`.
    pub fn critic_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        targets: &[f64],
        rng: &mut R,
    ) -> Result<(Var, CriticOut), Error> {
        let out = self.critic.forward(tape, store, &batch.obs, &batch.actions, self.gate(), rng, None)?;
        let q = tape.pick_cols(out.q, &batch.actions);
        let y = tape.constant(Array::matrix(targets.len(), 1, targets.to_vec()));
        let err = tape.sub(q, y);
        let sq = tape.square(err);
        let sum = tape.sum_all(sq);
        Ok((tape.scale(sum, 1.0 / batch.size() as f64), out))
    }

    /// Policy loss `-mean_rows Σ_a sg(π(a)) log π(a) sg(Q(a) - b)` minus the
    /// entropy bonus, for fixed critic values `q` (`[rows, n_actions]`).
    pub fn actor_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, q: &Array) -> Result<(Var, f64), Error> {
        let probs = self.actor.probs(store, &batch.obs)?;
        let weights = advantage_weights(&probs, q);
        self.actor_loss_with_weights(tape, store, batch, &weights)
    }

    /// The actor loss with the stopped-gradient factor `π(a)(Q(a) - b)`
    /// supplied directly.
    pub fn actor_loss_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        weights: &Array,
    ) -> Result<(Var, f64), Error> {
        let o = tape.constant(batch.obs.clone());
        let logp = self.actor.log_probs(tape, store, o)?;
        let rows = batch.obs.rows();
        let w = tape.constant(weights.clone());
        let pg = tape.mul(logp, w);
        let pg = tape.sum_all(pg);
        let p = tape.exp(logp);
        let plogp = tape.mul(p, logp);
        let negent = tape.sum_all(plogp);
        let e = tape.scale(negent, self.config.entropy_coef);
        let total = tape.sub(e, pg);
        let loss = tape.scale(total, 1.0 / rows as f64);
        let entropy = -tape.scalar(negent) / rows as f64;
        Ok((loss, entropy))
    }

    /// One critic step, one actor step and a target update on a fresh minibatch.
    pub fn update(&mut self) -> Result<Option<AcUpdateStats>, Error> {
        if self.buffer.len() < self.config.batch_size.max(1) {
            return Ok(None);
        }
        let items = self.buffer.sample(self.config.batch_size, &mut self.rng);
        let batch = Batch::from_transitions(&items)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.gen());

        let targets = self.td_targets(&batch, &mut rng)?;
        let mut tape = Tape::new();
        let (loss, out) = self.critic_loss(&mut tape, &self.critic_store, &batch, &targets, &mut rng)?;
        let critic_loss = tape.scalar(loss);
        let graph_density = out.attention.as_ref().and_then(|att| hard_density(&tape, att));
        let grads = tape.gradients(loss)?;
        self.critic_store.set_grads(&grads);
        self.critic_adam.step(&mut self.critic_store)?;

        let mut qtape = Tape::new();
        let q_out = self.critic.forward(&mut qtape, &self.critic_store, &batch.obs, &batch.actions, self.gate(), &mut rng, None)?;
        let q = qtape.value(q_out.q).clone();
        let mut atape = Tape::new();
        let (aloss, entropy) = self.actor_loss(&mut atape, &self.actor_store, &batch, &q)?;
        let grads = atape.gradients(aloss)?;
        self.actor_store.set_grads(&grads);
        self.actor_adam.step(&mut self.actor_store)?;

        soft_update(&mut self.target_store, &self.critic_store, self.config.polyak)?;
        self.updates += 1;
        Ok(Some(AcUpdateStats { critic_loss, actor_loss: atape.scalar(aloss), entropy, graph_density }))
    }

    /// Runs one exploring episode, storing transitions and updating on
    /// schedule. Returns the summed reward averaged over agents and the
    /// update stats collected on the way.
    pub fn run_episode<E: MarkovGame>(&mut self, env: &mut E) -> Result<(f64, Vec<AcUpdateStats>), Error> {
        let seed = self.rng.gen();
        let mut obs = env.reset(seed);
        let n = env.n_agents() as f64;
        let mut total = 0.0;
        let mut stats = Vec::new();
        loop {
            let mut act_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let actions = self.act(&obs, true, &mut act_rng)?;
            let step = env.step(&actions)?;
            total += step.rewards.iter().sum::<f64>() / n;
            // The only episode end is the time limit, which is not terminal.
            self.buffer.push(Transition {
                obs: obs.clone(),
                actions,
                rewards: step.rewards.clone(),
                next_obs: step.obs.clone(),
                done: false,
            });
            self.env_steps += 1;
            if self.config.learn && self.env_steps.is_multiple_of(self.config.update_every.max(1) as u64) {
                stats.extend(self.update()?);
            }
            obs = step.obs;
            if step.done {
                break;
            }
        }
        Ok((total, stats))
    }

    /// Trains for `episodes` episodes; one curve point per `eval_interval`
    /// episodes with the mean episode reward of that interval.
    pub fn train<E: MarkovGame>(
        &mut self,
        env: &mut E,
        episodes: usize,
        eval_interval: usize,
    ) -> Result<Vec<CurvePoint>, Error> {
        let interval = eval_interval.max(1);
        let mut curve = Vec::new();
        let mut rewards = Vec::new();
        let mut densities = Vec::new();
        let mut losses = Vec::new();
        for ep in 0..episodes {
            let (r, stats) = self.run_episode(env)?;
            rewards.push(r);
            for s in stats {
                densities.extend(s.graph_density);
                losses.push(s.critic_loss);
            }
            if (ep + 1) % interval == 0 {
                curve.push(CurvePoint {
                    episode: ep + 1,
                    mean_adversary_reward: mean(&rewards),
                    graph_density: (!densities.is_empty()).then(|| mean(&densities)),
                    critic_loss: if losses.is_empty() { 0.0 } else { mean(&losses) },
                });
                rewards.clear();
                densities.clear();
                losses.clear();
            }
        }
        Ok(curve)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn hard_density(tape: &Tape, att: &AttentionOutput) -> Option<f64> {
    let h = tape.value(att.hard?).data();
    Some(h.iter().filter(|&&v| v > 0.5).count() as f64 / h.len() as f64)
}

/// Greedy evaluation: mean over episodes of the summed reward averaged
/// over agents.
pub fn evaluate<E: MarkovGame>(agent: &AcAgent, env: &mut E, episodes: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = env.n_agents() as f64;
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng.gen());
        loop {
            let actions = agent.act(&obs, false, &mut rng)?;
            let step = env.step(&actions)?;
            total += step.rewards.iter().sum::<f64>() / n;
            obs = step.obs;
            if step.done {
                break;
            }
        }
    }
    Ok(total / episodes.max(1) as f64)
}
