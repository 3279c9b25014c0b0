//! Two-stage attention game abstraction.
//!
//! For every agent `i`, a hard stage decides which other agents `j` it
//! interacts with, and a soft stage weights the surviving edges:
//!
//! * hard: the ordered pair sequence `((f_i,f_1), …, (f_i,f_n))` (skipping
//!   `j = i`, ascending `j`) runs through a Bi-LSTM; each position is mapped
//!   to two logits `[off, on]` and passed through Gumbel-softmax. The `on`
//!   component is `W_h[i][j]`.
//! * soft: `s_ij = (W_k f_j)·(W_q f_i)`, softmax over the surviving `j` only.
//!   Cut edges get weight exactly zero.
//! * aggregation: `x_i = Σ_{j≠i} W_h[i][j]·W_s[i][j]·v_j`; a row with no
//!   surviving edge yields the zero vector.
//!
//! Internally agents are processed in batches of independent groups of `n`
//! agents, and pairs are laid out row-major as `(group, i, position)` where
//! position `p` refers to agent `p` if `p < i` and `p + 1` otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Array, BiLstm, DiffError, GateMode, Linear, Mlp, ParamId, ParamStore, Tape, Var};

/// How neighbour contributions are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    /// Hard Gumbel gate followed by masked soft attention.
    #[default]
    TwoStage,
    /// Softmax over all other agents, no gate.
    SoftOnly,
    /// Uniform average over all other agents.
    MeanPool,
    /// No communication: `x_i = 0`.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Hidden width of each direction of the pair Bi-LSTM.
    pub hard_hidden: usize,
    /// Width of keys and queries.
    pub key_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { hard_hidden: 128, key_dim: 32 }
    }
}

/// Settings for one pass through the hard gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub mode: GateMode,
    pub temperature: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Self { mode: GateMode::StraightThrough, temperature: 1.0 }
    }
}

/// Agent index referred to by pair position `p` of agent `i`.
pub fn other_agent(i: usize, p: usize) -> usize {
    if p < i {
        p
    } else {
        p + 1
    }
}

/// Result of game abstraction for one group of `n` agents. All matrices
/// are `n x n`, row-major, with a zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentGraph {
    pub n: usize,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub combined: Vec<f64>,
}

impl AgentGraph {
    /// Builds full matrices from per-pair values in `(i, position)` order.
    pub fn from_pairs(n: usize, hard: &[f64], soft: &[f64], combined: &[f64]) -> Self {
        let m = n.saturating_sub(1);
        assert!(hard.len() == n * m && soft.len() == n * m && combined.len() == n * m);
        let expand = |src: &[f64]| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for p in 0..m {
                    out[i * n + other_agent(i, p)] = src[i * m + p];
                }
            }
            out
        };
        Self { n, hard: expand(hard), soft: expand(soft), combined: expand(combined) }
    }

    pub fn hard(&self, i: usize, j: usize) -> f64 {
        self.hard[i * self.n + j]
    }

    pub fn soft(&self, i: usize, j: usize) -> f64 {
        self.soft[i * self.n + j]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.combined[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.combined[i * self.n..(i + 1) * self.n]
    }

    /// Fraction of off-diagonal hard entries that are on.
    pub fn density(&self) -> f64 {
        let edges = (self.n * (self.n - 1)) as f64;
        self.hard.iter().filter(|&&h| h > 0.5).count() as f64 / edges
    }

    /// Checks the structural invariants of a straight-through graph:
    /// binary hard matrix, soft entries in `[0,1]`, zero diagonal, rows with
    /// a surviving edge summing to one and all other rows zero.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n;
        for i in 0..n {
            if self.hard(i, i) != 0.0 || self.soft(i, i) != 0.0 || self.weight(i, i) != 0.0 {
                return Err(format!("row {i}: non-zero diagonal"));
            }
            let mut surviving = 0;
            for j in 0..n {
                let h = self.hard(i, j);
                if h != 0.0 && h != 1.0 {
                    return Err(format!("hard[{i}][{j}] = {h} is not binary"));
                }
                let s = self.soft(i, j);
                if !(0.0..=1.0).contains(&s) {
                    return Err(format!("soft[{i}][{j}] = {s} outside [0,1]"));
                }
                if (self.weight(i, j) - h * s).abs() > 1e-12 {
                    return Err(format!("combined[{i}][{j}] != hard*soft"));
                }
                if h == 1.0 {
                    surviving += 1;
                }
            }
            let sum: f64 = self.row(i).iter().sum();
            if surviving > 0 && (sum - 1.0).abs() > 1e-9 {
                return Err(format!("row {i} sums to {sum}"));
            }
            if surviving == 0 && self.row(i).iter().any(|&w| w != 0.0) {
                return Err(format!("row {i} has no surviving edge but non-zero weights"));
            }
        }
        Ok(())
    }
}

/// `x_i = Σ_{j≠i} W[i][j] · v_j`, plain arithmetic.
pub fn aggregate(values: &[Vec<f64>], graph: &AgentGraph, i: usize) -> Vec<f64> {
    assert_eq!(values.len(), graph.n, "one value vector per agent");
    let d = values.first().map_or(0, Vec::len);
    let mut x = vec![0.0; d];
    for (j, v) in values.iter().enumerate() {
        if j == i {
            continue;
        }
        let w = graph.weight(i, j);
        if w != 0.0 {
            for (acc, vk) in x.iter_mut().zip(v) {
                *acc += w * vk;
            }
        }
    }
    x
}

/// Encodes one observation (or a batch of rows) into an embedding.
pub fn encode_observation(
    encoder: &Mlp,
    tape: &mut Tape,
    store: &ParamStore,
    observation: Var,
) -> Result<Var, DiffError> {
    encoder.forward(tape, store, observation)
}

/// Inputs for a batched attention pass over `groups` independent groups of
/// `n` agents. Rows are ordered `(group, agent)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInput<'a> {
    /// Features that form queries (and the first half of each hard pair).
    pub query: Var,
    /// Features that form keys (and the second half of each hard pair).
    pub key: Var,
    /// Values being aggregated.
    pub value: Var,
    pub n: usize,
    /// Per-row availability; an unavailable agent neither sends nor receives.
    pub alive: Option<&'a [bool]>,
    /// Replaces the sampled hard gate with fixed per-pair values (pair
    /// order). No noise is drawn when set. Used to force edges closed.
    pub hard_override: Option<&'a [f64]>,
}

/// Tape handles for one batched pass. Pair tensors are `[rows*(n-1), 1]`.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub x: Var,
    pub hard: Option<Var>,
    pub soft: Option<Var>,
    pub combined: Option<Var>,
    pub n: usize,
    pub groups: usize,
    /// Candidate mask (both endpoints alive) per pair.
    pub candidate: Vec<bool>,
}

impl AttentionOutput {
    /// Graph of group `g` as recorded on the tape. Aggregators without a
    /// hard stage report every candidate edge as on.
    pub fn graph(&self, tape: &Tape, g: usize) -> AgentGraph {
        let m = self.n - 1;
        let span = g * self.n * m..(g + 1) * self.n * m;
        let cand: Vec<f64> = self.candidate[span.clone()].iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let pick = |v: Option<Var>, fallback: &[f64]| match v {
            Some(v) => tape.value(v).data()[span.clone()].to_vec(),
            None => fallback.to_vec(),
        };
        let zeros = vec![0.0; cand.len()];
        let hard = pick(self.hard, &cand);
        let combined = pick(self.combined, &zeros);
        let soft = match self.soft {
            Some(_) => pick(self.soft, &zeros),
            None => combined.clone(),
        };
        AgentGraph::from_pairs(self.n, &hard, &soft, &combined)
    }
}

/// Parameters of the attention block. Which parts exist depends on the
/// aggregator: the hard stage only for [`Aggregator::TwoStage`], keys and
/// queries for both attention variants.
#[derive(Clone, Debug)]
pub struct GameAbstraction {
    pub kind: Aggregator,
    pub feature_dim: usize,
    pub pair_lstm: Option<BiLstm>,
    pub gate_head: Option<Linear>,
    pub w_key: Option<ParamId>,
    pub w_query: Option<ParamId>,
}

impl GameAbstraction {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        config: &AttentionConfig,
        kind: Aggregator,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let (pair_lstm, gate_head) = if kind == Aggregator::TwoStage {
            let lstm = BiLstm::new(store, &format!("{name}.pair"), 2 * feature_dim, config.hard_hidden, rng)?;
            let head = Linear::new(store, &format!("{name}.gate"), lstm.out_dim(), 2, rng)?;
            (Some(lstm), Some(head))
        } else {
            (None, None)
        };
        let (w_key, w_query) = if matches!(kind, Aggregator::TwoStage | Aggregator::SoftOnly) {
            let k = store.init_uniform(&format!("{name}.wk"), &[feature_dim, config.key_dim], feature_dim, rng)?;
            let q = store.init_uniform(&format!("{name}.wq"), &[feature_dim, config.key_dim], feature_dim, rng)?;
            (Some(k), Some(q))
        } else {
            (None, None)
        };
        Ok(Self { kind, feature_dim, pair_lstm, gate_head, w_key, w_query })
    }

    fn check_features(&self, tape: &Tape, v: Var, n: usize) -> Result<usize, DiffError> {
        let val = tape.value(v);
        if n < 2 {
            return Err(DiffError::Shape(format!("attention needs at least 2 agents, got {n}")));
        }
        if val.cols() != self.feature_dim || !val.rows().is_multiple_of(n) {
            return Err(DiffError::Shape(format!(
                "attention features {:?} for n={n}, feature width {}",
                val.shape(),
                self.feature_dim
            )));
        }
        Ok(val.rows() / n)
    }

    /// Hard-stage logits for every pair, `[rows*(n-1), 2]` in pair order,
    /// using the batched pair layout.
    fn pair_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key: Var,
        n: usize,
        groups: usize,
    ) -> Result<Var, DiffError> {
        let lstm = self.pair_lstm.as_ref().expect("two-stage has a pair lstm");
        let head = self.gate_head.as_ref().expect("two-stage has a gate head");
        let d = self.feature_dim;
        let m = n - 1;
        let rows = groups * n;
        // [f_i, f_j] W_x = f_i W_x[..d] + f_j W_x[d..]; project each agent once
        // and gather the key half per position.
        let mut project = |cell: &crate::diffnet::Lstm| {
            let wx = tape.param(store, cell.w_input);
            let wq = tape.slice_rows(wx, 0, d);
            let wk = tape.slice_rows(wx, d, 2 * d);
            let a = tape.matmul(query, wq);
            let b = tape.matmul(key, wk);
            (0..m)
                .map(|p| {
                    let idx: Vec<usize> =
                        (0..rows).map(|r| (r / n) * n + other_agent(r % n, p)).collect();
                    let bp = tape.gather_rows(b, &idx);
                    tape.add(a, bp)
                })
                .collect::<Vec<_>>()
        };
        let proj_f = project(&lstm.forward);
        let proj_b = project(&lstm.backward);
        let outs = lstm.encode_projected(tape, store, &proj_f, &proj_b)?;
        let logits = outs.into_iter().map(|o| head.forward(tape, store, o)).collect::<Result<Vec<_>, _>>()?;
        // (p, row) -> (row, p)
        let stacked = tape.concat_rows(&logits);
        let perm: Vec<usize> = (0..rows * m).map(|k| (k % m) * rows + k / m).collect();
        Ok(tape.gather_rows(stacked, &perm))
    }

    /// Batched forward for any aggregator.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: AttentionInput<'_>,
        gate: Gate,
        rng: &mut R,
    ) -> Result<AttentionOutput, DiffError> {
        let n = input.n;
        let groups = self.check_features(tape, input.query, n)?;
        self.check_features(tape, input.key, n)?;
        let rows = groups * n;
        let m = n - 1;
        let dv = tape.value(input.value).cols();
        if tape.value(input.value).rows() != rows {
            return Err(DiffError::Shape("attention values row count".into()));
        }
        if let Some(a) = input.alive {
            if a.len() != rows {
                return Err(DiffError::Shape(format!("alive mask has {} entries for {rows} rows", a.len())));
            }
        }
        let alive = |r: usize| input.alive.is_none_or(|a| a[r]);
        let self_idx: Vec<usize> = (0..rows * m).map(|k| k / m).collect();
        let other_idx: Vec<usize> = (0..rows * m)
            .map(|k| {
                let r = k / m;
                (r / n) * n + other_agent(r % n, k % m)
            })
            .collect();
        let candidate: Vec<bool> = (0..rows * m).map(|k| alive(self_idx[k]) && alive(other_idx[k])).collect();
        let cand_arr = Array::matrix(rows * m, 1, candidate.iter().map(|&c| f64::from(u8::from(c))).collect());

        let mut out = AttentionOutput { x: input.value, hard: None, soft: None, combined: None, n, groups, candidate };
        let scores = |tape: &mut Tape| -> Var {
            let wk = tape.param(store, self.w_key.expect("keys"));
            let wq = tape.param(store, self.w_query.expect("queries"));
            let keys = tape.matmul(input.key, wk);
            let queries = tape.matmul(input.query, wq);
            let kj = tape.gather_rows(keys, &other_idx);
            let qi = tape.gather_rows(queries, &self_idx);
            let s = tape.row_dot(kj, qi);
            tape.reshape(s, rows, m)
        };

        let combined = match self.kind {
            Aggregator::None => {
                out.x = tape.constant(Array::zeros(&[rows, dv]));
                return Ok(out);
            }
            Aggregator::MeanPool => {
                let mut w = vec![0.0; rows * m];
                for r in 0..rows {
                    let k = out.candidate[r * m..(r + 1) * m].iter().filter(|&&c| c).count();
                    for p in 0..m {
                        if out.candidate[r * m + p] {
                            w[r * m + p] = 1.0 / k as f64;
                        }
                    }
                }
                tape.constant(Array::matrix(rows * m, 1, w))
            }
            Aggregator::SoftOnly => {
                let s = scores(tape);
                let soft = tape.softmax_rows(s, Some(&out.candidate));
                let soft = tape.reshape(soft, rows * m, 1);
                out.soft = Some(soft);
                soft
            }
            Aggregator::TwoStage => {
                let on = match input.hard_override {
                    Some(h) => {
                        if h.len() != rows * m {
                            return Err(DiffError::Shape(format!("hard override has {} entries for {} pairs", h.len(), rows * m)));
                        }
                        tape.constant(Array::matrix(rows * m, 1, h.to_vec()))
                    }
                    None => {
                        let logits = self.pair_logits(tape, store, input.query, input.key, n, groups)?;
                        let gates = tape.gumbel_softmax(logits, gate.temperature, rng, gate.mode)?;
                        tape.slice_cols(gates, 1, 2)
                    }
                };
                let cand = tape.constant(cand_arr);
                let hard = tape.mul(on, cand);
                let survive: Vec<bool> = match gate.mode {
                    GateMode::StraightThrough => tape.value(hard).data().iter().map(|&h| h == 1.0).collect(),
                    GateMode::Relaxed => out.candidate.clone(),
                };
                let s = scores(tape);
                let soft = tape.softmax_rows(s, Some(&survive));
                let soft = tape.reshape(soft, rows * m, 1);
                out.hard = Some(hard);
                out.soft = Some(soft);
                // Same value as hard * soft, but closed edges keep a gate
                // gradient, so a gate that closed can reopen.
                let h = tape.reshape(hard, rows, m);
                let w = tape.gated_softmax_rows(s, h, &out.candidate);
                tape.reshape(w, rows * m, 1)
            }
        };
        out.combined = Some(combined);
        let vj = tape.gather_rows(input.value, &other_idx);
        let weighted = tape.mul_col(vj, combined);
        out.x = tape.sum_row_groups(weighted, m);
        Ok(out)
    }

    /// Two-stage pass over a single group whose features serve as queries,
    /// keys, and values.
    pub fn two_stage_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        gate: Gate,
        rng: &mut R,
    ) -> Result<(AgentGraph, Var), DiffError> {
        let n = tape.value(features).rows();
        let out = self.forward(
            tape,
            store,
            AttentionInput { query: features, key: features, value: features, n, alive: None, hard_override: None },
            gate,
            rng,
        )?;
        Ok((out.graph(tape, 0), out.x))
    }

    /// Hard gate for every agent of one group via the plain Bi-LSTM over
    /// explicit pair sequences. Returns `[n, n-1]` in pair order; noise is
    /// drawn in `(i, position)` order, two draws per pair.
    pub fn hard_attention<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        gate: Gate,
        rng: &mut R,
    ) -> Result<Var, DiffError> {
        let lstm = self.pair_lstm.as_ref().ok_or_else(|| DiffError::Shape("no hard stage".into()))?;
        let head = self.gate_head.as_ref().expect("gate head");
        let n = tape.value(features).rows();
        self.check_features(tape, features, n)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let fi = tape.slice_rows(features, i, i + 1);
            let seq: Vec<Var> = (0..n - 1)
                .map(|p| {
                    let j = other_agent(i, p);
                    let fj = tape.slice_rows(features, j, j + 1);
                    tape.concat_cols(&[fi, fj])
                })
                .collect();
            let outs = lstm.encode(tape, store, &seq)?;
            let mut ons = Vec::with_capacity(n - 1);
            for o in outs {
                let logits = head.forward(tape, store, o)?;
                let g = tape.gumbel_softmax(logits, gate.temperature, rng, gate.mode)?;
                ons.push(tape.slice_cols(g, 1, 2));
            }
            rows.push(tape.concat_cols(&ons));
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Soft weights of agent `i` over the others given its hard row (length
    /// `n`, zero at `i`). Returns `[1, n-1]` in pair order.
    pub fn soft_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        hard_row: &[f64],
        i: usize,
    ) -> Result<Var, DiffError> {
        let n = tape.value(features).rows();
        if hard_row.len() != n || hard_row[i] != 0.0 {
            return Err(DiffError::Shape(format!("hard row must have length {n} and a zero at {i}")));
        }
        let (wk, wq) = match (self.w_key, self.w_query) {
            (Some(k), Some(q)) => (tape.param(store, k), tape.param(store, q)),
            _ => return Err(DiffError::Shape("aggregator has no keys/queries".into())),
        };
        let fi = tape.slice_rows(features, i, i + 1);
        let q = tape.matmul(fi, wq);
        let mut scores = Vec::with_capacity(n - 1);
        let mut mask = Vec::with_capacity(n - 1);
        for p in 0..n - 1 {
            let j = other_agent(i, p);
            let fj = tape.slice_rows(features, j, j + 1);
            let k = tape.matmul(fj, wk);
            scores.push(tape.row_dot(k, q));
            mask.push(hard_row[j] > 0.5);
        }
        let s = tape.concat_cols(&scores);
        Ok(tape.softmax_rows(s, Some(&mask)))
    }

    /// Plain softmax weights of agent `i` over every other agent, in agent
    /// order with a zero at `i`.
    pub fn soft_only_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        i: usize,
    ) -> Result<Vec<f64>, DiffError> {
        let n = tape.value(features).rows();
        if n < 2 {
            return Err(DiffError::Shape("soft attention needs at least 2 agents".into()));
        }
        let mut row = vec![1.0; n];
        row[i] = 0.0;
        let w = self.soft_attention(tape, store, features, &row, i)?;
        let mut full = vec![0.0; n];
        for (p, &v) in tape.value(w).data().iter().enumerate() {
            full[other_agent(i, p)] = v;
        }
        Ok(full)
    }
}
