//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to run its backward rule. Nodes are only ever appended, so
//! indices are already a topological order; [`Tape::gradients`] walks them
//! once in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::{gemm, Array, DiffError, GateMode, Gradients, ParamId, ParamStore};

/// Reference to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumCols(Var),
    SumRowGroups(Var, usize),
    RowDot(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    PickCols(Var, Vec<usize>),
    GatedSoftmax { scores: Var, gates: Var, candidate: Vec<bool> },
    Gumbel { logits: Var, relaxed: Array, tau: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum_all",
            Op::SumCols(_) => "sum_cols",
            Op::SumRowGroups(..) => "sum_row_groups",
            Op::RowDot(..) => "row_dot",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::PickCols(..) => "pick_cols",
            Op::GatedSoftmax { .. } => "gated_softmax",
            Op::Gumbel { .. } => "gumbel_softmax",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Computation record. One tape per forward pass; cheap to create.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    n_params: usize,
    non_finite: Option<(usize, &'static str)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Fails if any recorded value contains NaN or infinity.
    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.non_finite {
            Some((node, op)) => Err(DiffError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf)
    }

    /// Records a parameter (once per tape; later calls reuse the node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.n_params = self.n_params.max(store.len());
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{what}: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a[m,n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        assert_eq!(bv.len(), n, "add_row: {:?} + {:?}", av.shape(), bv.shape());
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, b))
    }

    /// `a[m,n] * c[m,1]`, scaling each row by its coefficient.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        let n = av.cols();
        assert_eq!(cv.len(), av.rows(), "mul_col: {:?} * {:?}", av.shape(), cv.shape());
        let mut value = av.clone();
        for (row, &s) in value.data_mut().chunks_mut(n).zip(cv.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        self.push(value, Op::MulCol(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(Array::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        self.push(Array::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start < end && end <= cols, "slice_cols {start}..{end} of {cols}");
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row_slice(r)[start..end]);
        }
        self.push(Array::matrix(rows, end - start, data), Op::SliceCols(a, start))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start < end && end <= rows, "slice_rows {start}..{end} of {rows}");
        let data = av.data()[start * cols..end * cols].to_vec();
        self.push(Array::matrix(end - start, cols, data), Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            data.extend_from_slice(av.row_slice(r));
        }
        self.push(Array::matrix(idx.len(), cols, data), Op::GatherRows(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(vec![rows, cols]);
        self.push(value, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let m = data.len();
        self.push(Array::matrix(m, 1, data), Op::SumCols(a))
    }

    /// Sums consecutive groups of `group` rows: `[g*k, n] -> [k, n]`.
    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(group > 0 && rows % group == 0, "sum_row_groups: {rows} rows by {group}");
        let mut data = vec![0.0; rows / group * cols];
        for r in 0..rows {
            let out = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (o, x) in out.iter_mut().zip(av.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Array::matrix(rows / group, cols, data), Op::SumRowGroups(a, group))
    }

    /// Row-wise dot products, `[m,n]·[m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let data: Vec<f64> = (0..av.rows())
            .map(|r| av.row_slice(r).iter().zip(bv.row_slice(r)).map(|(x, y)| x * y).sum())
            .collect();
        let m = data.len();
        self.push(Array::matrix(m, 1, data), Op::RowDot(a, b))
    }

    /// Row-wise softmax. Entries where `mask` is false get weight exactly 0;
    /// a row with no unmasked entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), av.len(), "softmax mask length");
        }
        let value = masked_softmax(av, mask);
        self.push(value, Op::Softmax(a))
    }

    /// `w[r,c] = h[r,c] e[r,c] / sum_k h[r,k] e[r,k]` with `e = exp(scores)`,
    /// over entries where `candidate` holds and the gate is positive. With
    /// 0/1 gates the value equals `softmax_rows` masked to the open entries,
    /// but closed entries still receive a gate gradient. A row with no open
    /// entry is all zeros; its gate gradient is `g * softmax(candidates)`.
    pub fn gated_softmax_rows(&mut self, scores: Var, gates: Var, candidate: &[bool]) -> Var {
        let (sv, hv) = (self.value(scores), self.value(gates));
        assert_eq!(sv.shape(), hv.shape(), "gated_softmax shape mismatch");
        assert_eq!(candidate.len(), sv.len(), "gated_softmax mask length");
        let cols = sv.cols();
        let mut value = Array::zeros(sv.shape());
        for r in 0..sv.rows() {
            let (s, h) = (sv.row_slice(r), hv.row_slice(r));
            let open = |c: usize| candidate[r * cols + c] && h[c] > 0.0;
            let mx = (0..cols).filter(|&c| open(c)).map(|c| s[c]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let row = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (c, x) in row.iter_mut().enumerate() {
                if open(c) {
                    *x = h[c] * (s[c] - mx).exp();
                    z += *x;
                }
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(value, Op::GatedSoftmax { scores, gates, candidate: candidate.to_vec() })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// `out[r] = a[r, idx[r]]`, shape `[m,1]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows(), "pick_cols index count");
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        self.push(Array::matrix(idx.len(), 1, data), Op::PickCols(a, idx.to_vec()))
    }

    /// Gumbel-softmax over each row of `logits`, drawing standard Gumbel
    /// noise from `rng` in row-major order.
    pub fn gumbel_softmax<R: Rng>(
        &mut self,
        logits: Var,
        tau: f64,
        rng: &mut R,
        mode: GateMode,
    ) -> Result<Var, DiffError> {
        let shape = self.value(logits).shape().to_vec();
        let noise = sample_gumbel(&shape, rng);
        self.gumbel_softmax_with_noise(logits, &noise, tau, mode)
    }

    /// Gumbel-softmax with caller-supplied noise. In straight-through mode
    /// the forward value is the exact one-hot of the relaxed argmax (lowest
    /// index on ties) while the backward rule is the relaxed one.
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: &Array,
        tau: f64,
        mode: GateMode,
    ) -> Result<Var, DiffError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DiffError::Temperature(tau));
        }
        let lv = self.value(logits);
        if noise.len() != lv.len() {
            return Err(DiffError::Shape(format!(
                "gumbel noise {:?} for logits {:?}",
                noise.shape(),
                lv.shape()
            )));
        }
        let perturbed = lv.zip_map(noise, |l, g| (l + g) / tau);
        let relaxed = masked_softmax(&perturbed, None);
        let value = match mode {
            GateMode::Relaxed => relaxed.clone(),
            GateMode::StraightThrough => one_hot_argmax(&relaxed),
        };
        Ok(self.push(value, Op::Gumbel { logits, relaxed, tau }))
    }

    /// Zeros the store's gradient slots, then writes `∂loss/∂param` into them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), DiffError> {
        let grads = self.gradients(loss)?;
        store.set_grads(&grads);
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Parameters the loss does not
    /// reach get no entry (equivalently, a zero gradient).
    pub fn gradients(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        self.check_finite()?;
        let mut out = Gradients::new(self.n_params);
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    acc(&mut grads, *a, Array::new(av.shape().to_vec(), ga).unwrap());
                    acc(&mut grads, *b, Array::new(bv.shape().to_vec(), gb).unwrap());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, like(self.value(*a), g.clone()));
                    acc(&mut grads, *b, like(self.value(*b), g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, like(self.value(*b), g.map(|x| -x)));
                    acc(&mut grads, *a, like(self.value(*a), g));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, like(self.value(*a), ga));
                    acc(&mut grads, *b, like(self.value(*b), gb));
                }
                Op::AddRow(a, b) => {
                    let bv = self.value(*b);
                    let n = bv.len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *b, Array::new(bv.shape().to_vec(), gb).unwrap());
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (self.value(*a), self.value(*c));
                    let n = av.cols();
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; cv.len()];
                    for (r, gcr) in gc.iter_mut().enumerate() {
                        let s = cv.data()[r];
                        let grow = &g.data()[r * n..(r + 1) * n];
                        *gcr = grow.iter().zip(av.row_slice(r)).map(|(x, y)| x * y).sum();
                        ga.data_mut()[r * n..(r + 1) * n].iter_mut().for_each(|x| *x *= s);
                    }
                    acc(&mut grads, *c, Array::new(cv.shape().to_vec(), gc).unwrap());
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Relu(a) => {
                    acc(&mut grads, *a, g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }))
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Square(a) => acc(&mut grads, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, Array::new(pv.shape().to_vec(), gp).unwrap());
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let gp = g.data()[offset..offset + pv.len()].to_vec();
                        offset += pv.len();
                        acc(&mut grads, p, Array::new(pv.shape().to_vec(), gp).unwrap());
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (cols, w) = (av.cols(), g.cols());
                    let mut ga = Array::zeros(av.shape());
                    for r in 0..av.rows() {
                        ga.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Array::zeros(av.shape());
                    ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Array::zeros(av.shape());
                    for (k, &r) in idx.iter().enumerate() {
                        for (d, s) in ga.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(g.row_slice(k)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(shape));
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Array::filled(av.shape(), g.item()));
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Array::zeros(av.shape());
                    for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                        row.iter_mut().for_each(|x| *x = g.data()[r]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumRowGroups(a, group) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Array::zeros(av.shape());
                    for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                        row.copy_from_slice(g.row_slice(r / group));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let cols = av.cols();
                    let mut ga = Array::zeros(av.shape());
                    let mut gb = Array::zeros(bv.shape());
                    for r in 0..av.rows() {
                        let s = g.data()[r];
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] = s * bv.data()[r * cols + c];
                            gb.data_mut()[r * cols + c] = s * av.data()[r * cols + c];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Softmax(a) => {
                    acc(&mut grads, *a, softmax_backward(&node.value, &g, 1.0));
                }
                Op::GatedSoftmax { scores, gates, candidate } => {
                    let (gs, gh) = gated_softmax_backward(self.value(*scores), self.value(*gates), candidate, &node.value, &g);
                    acc(&mut grads, *scores, gs);
                    acc(&mut grads, *gates, gh);
                }
                Op::LogSoftmax(a) => {
                    let cols = g.cols();
                    let mut ga = g.clone();
                    for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                        let gsum: f64 = g.row_slice(r).iter().sum();
                        for (c, x) in row.iter_mut().enumerate() {
                            *x -= node.value.get(r, c).exp() * gsum;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::PickCols(a, idx) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Array::zeros(av.shape());
                    for (r, &c) in idx.iter().enumerate() {
                        ga.data_mut()[r * cols + c] += g.data()[r];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gumbel { logits, relaxed, tau } => {
                    acc(&mut grads, *logits, softmax_backward(relaxed, &g, 1.0 / tau));
                }
            }
        }
        Ok(out)
    }
}

fn like(target: &Array, g: Array) -> Array {
    if g.shape() == target.shape() {
        g
    } else {
        g.reshaped(target.shape().to_vec())
    }
}

fn acc(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax(a: &Array, mask: Option<&[bool]>) -> Array {
    let cols = a.cols();
    let mut value = a.clone();
    for (r, row) in value.data_mut().chunks_mut(cols).enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let mx = (0..cols).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            row.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let mut z = 0.0;
        for (c, x) in row.iter_mut().enumerate() {
            *x = if keep(c) { (*x - mx).exp() } else { 0.0 };
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    value
}

/// Gradient of a row softmax with output `y`, upstream `g`, and an outer
/// scale on the logits.
fn softmax_backward(y: &Array, g: &Array, scale: f64) -> Array {
    let cols = y.cols();
    let mut out = Array::zeros(y.shape());
    for r in 0..y.rows() {
        let yr = y.row_slice(r);
        let gr = g.row_slice(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            out.data_mut()[r * cols + c] = scale * yr[c] * (gr[c] - dot);
        }
    }
    out
}

fn gated_softmax_backward(s: &Array, h: &Array, cand: &[bool], w: &Array, g: &Array) -> (Array, Array) {
    let cols = s.cols();
    let (mut gs, mut gh) = (Array::zeros(s.shape()), Array::zeros(s.shape()));
    for r in 0..s.rows() {
        let (sr, hr, wr, gr) = (s.row_slice(r), h.row_slice(r), w.row_slice(r), g.row_slice(r));
        let cand = &cand[r * cols..(r + 1) * cols];
        let open: Vec<bool> = (0..cols).map(|c| cand[c] && hr[c] > 0.0).collect();
        let any_open = open.contains(&true);
        let base = if any_open { &open[..] } else { cand };
        let mx = (0..cols).filter(|&c| base[c]).map(|c| sr[c]).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        // exp(s - mx) for every candidate, capped so closed entries far
        // above the open maximum stay finite.
        let e: Vec<f64> = (0..cols).map(|c| if cand[c] { (sr[c] - mx).min(700.0).exp() } else { 0.0 }).collect();
        let (gs_row, gh_row) = (r * cols..(r + 1) * cols, r * cols..(r + 1) * cols);
        if !any_open {
            let z: f64 = e.iter().sum();
            for (o, c) in gh.data_mut()[gh_row].iter_mut().zip(0..cols) {
                *o = gr[c] * e[c] / z;
            }
            continue;
        }
        let d: f64 = (0..cols).filter(|&c| open[c]).map(|c| hr[c] * e[c]).sum();
        let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, c) in gs.data_mut()[gs_row].iter_mut().zip(0..cols) {
            *o = wr[c] * (gr[c] - dot);
        }
        for (o, c) in gh.data_mut()[gh_row].iter_mut().zip(0..cols) {
            *o = e[c] / d * (gr[c] - dot);
        }
    }
    (gs, gh)
}

fn one_hot_argmax(y: &Array) -> Array {
    let cols = y.cols();
    let mut out = Array::zeros(y.shape());
    for r in 0..y.rows() {
        let row = y.row_slice(r);
        let mut best = 0;
        for c in 1..cols {
            if row[c] > row[best] {
                best = c;
            }
        }
        out.data_mut()[r * cols + best] = 1.0;
    }
    out
}

/// One standard Gumbel draw, `-ln(-ln u)` with `u` uniform on `(0,1)`.
pub fn gumbel_noise<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng>(shape: &[usize], rng: &mut R) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel_noise(rng)).collect();
    Array::new(shape.to_vec(), data).expect("non-empty shape")
}
