use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x W + b` over rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let weight = store.init_uniform(&format!("{name}.w"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.init_constant(&format!("{name}.b"), &[out_dim], 0.0)?;
        Ok(Self { name: name.to_string(), weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let width = tape.value(x).cols();
        let wshape = store.value(self.weight).shape();
        if width != self.in_dim || wshape != [self.in_dim, self.out_dim] {
            return Err(DiffError::Layer {
                layer: self.name.clone(),
                detail: format!(
                    "input width {width}, layer expects {} (weight shape {wshape:?})",
                    self.in_dim
                ),
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        Ok(tape.add_row(xw, b))
    }
}

/// Stack of [`Linear`] layers with an activation between layers and an
/// optional one on the output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_act: Activation,
    pub output_act: Activation,
}

impl Mlp {
    /// `widths` lists the input width followed by each layer's output width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(DiffError::Layer {
                layer: name.to_string(),
                detail: format!("invalid widths {widths:?}"),
            });
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.{k}"), w[0], w[1], rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers, hidden_act, output_act })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            let act = if k == last { self.output_act } else { self.hidden_act };
            h = act.apply(tape, h);
        }
        Ok(h)
    }
}

/// LSTM cell. Gate blocks are laid out `[input, forget, candidate, output]`
/// along the last axis of the weights.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let w_input = store.init_uniform(&format!("{name}.wx"), &[in_dim, 4 * hidden], in_dim, rng)?;
        let w_hidden = store.init_uniform(&format!("{name}.wh"), &[hidden, 4 * hidden], hidden, rng)?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.insert(
            &format!("{name}.b"),
            super::Array::new(vec![4 * hidden], b)?,
            super::Init::LstmBias { forget: 1.0 },
        )?;
        Ok(Self { name: name.to_string(), w_input, w_hidden, bias, in_dim, hidden })
    }

    fn check(&self, tape: &Tape, v: Var, width: usize, what: &str) -> Result<(), DiffError> {
        let got = tape.value(v).cols();
        if got != width {
            return Err(DiffError::Layer {
                layer: self.name.clone(),
                detail: format!("{what} width {got}, expected {width}"),
            });
        }
        Ok(())
    }

    /// One step over a batch of rows.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), DiffError> {
        self.check(tape, x, self.in_dim, "input")?;
        let wx = tape.param(store, self.w_input);
        let xw = tape.matmul(x, wx);
        self.step_projected(tape, store, xw, h, c)
    }

    /// Step where the input projection `x W_x` has already been computed.
    pub fn step_projected(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_proj: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), DiffError> {
        let hs = self.hidden;
        self.check(tape, x_proj, 4 * hs, "projected input")?;
        self.check(tape, h, hs, "hidden")?;
        self.check(tape, c, hs, "cell")?;
        let wh = tape.param(store, self.w_hidden);
        let b = tape.param(store, self.bias);
        let hw = tape.matmul(h, wh);
        let pre = tape.add(x_proj, hw);
        let gates = tape.add_row(pre, b);
        let i = tape.slice_cols(gates, 0, hs);
        let f = tape.slice_cols(gates, hs, 2 * hs);
        let g = tape.slice_cols(gates, 2 * hs, 3 * hs);
        let o = tape.slice_cols(gates, 3 * hs, 4 * hs);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        Ok((h_next, c_next))
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> (Var, Var) {
        let h = tape.constant(super::Array::zeros(&[rows, self.hidden]));
        let c = tape.constant(super::Array::zeros(&[rows, self.hidden]));
        (h, c)
    }
}

/// Forward and backward LSTMs over a sequence; output `t` is
/// `[h_fwd(t), h_bwd(t)]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            forward: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng)?,
            backward: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Encodes a sequence of equal-shape `[rows, in]` inputs.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, seq: &[Var]) -> Result<Vec<Var>, DiffError> {
        let Some(&first) = seq.first() else {
            return Err(DiffError::EmptySequence);
        };
        let rows = tape.value(first).rows();
        let wx_f = tape.param(store, self.forward.w_input);
        let wx_b = tape.param(store, self.backward.w_input);
        let mut proj_f = Vec::with_capacity(seq.len());
        let mut proj_b = Vec::with_capacity(seq.len());
        for &x in seq {
            if tape.value(x).rows() != rows {
                return Err(DiffError::Shape("bilstm inputs differ in row count".into()));
            }
            self.forward.check(tape, x, self.forward.in_dim, "input")?;
            proj_f.push(tape.matmul(x, wx_f));
            proj_b.push(tape.matmul(x, wx_b));
        }
        self.encode_projected(tape, store, &proj_f, &proj_b)
    }

    /// Same as [`BiLstm::encode`] with both directions' input projections
    /// supplied by the caller.
    pub fn encode_projected(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        proj_f: &[Var],
        proj_b: &[Var],
    ) -> Result<Vec<Var>, DiffError> {
        let len = proj_f.len();
        if len == 0 || proj_b.len() != len {
            return Err(DiffError::EmptySequence);
        }
        let rows = tape.value(proj_f[0]).rows();
        let (mut h, mut c) = self.forward.zero_state(tape, rows);
        let mut fwd = Vec::with_capacity(len);
        for &p in proj_f {
            (h, c) = self.forward.step_projected(tape, store, p, h, c)?;
            fwd.push(h);
        }
        let (mut h, mut c) = self.backward.zero_state(tape, rows);
        let mut bwd = vec![h; len];
        for t in (0..len).rev() {
            (h, c) = self.backward.step_projected(tape, store, proj_b[t], h, c)?;
            bwd[t] = h;
        }
        Ok(fwd.into_iter().zip(bwd).map(|(f, b)| tape.concat_cols(&[f, b])).collect())
    }
}
