use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Array, DiffError};

/// Handle to an entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How an entry was initialized; kept for checkpoints and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
    Constant(f64),
    /// Zeros except the forget-gate block, set to `forget`.
    LstmBias { forget: f64 },
    /// Values supplied by the caller (loaded or hand-set).
    Given,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    pub init: Init,
}

/// Named parameters with gradient slots. Insertion order is stable and is
/// the iteration order everywhere (optimizers, checkpoints, gradients).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array, init: Init) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let grad = Array::zeros(value.shape());
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, init });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn init_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId, DiffError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Array::new(shape.to_vec(), data)?, Init::FanInUniform { fan_in })
    }

    pub fn init_constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId, DiffError> {
        self.insert(name, Array::filled(shape, v), Init::Constant(v))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].grad
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, id: ParamId, value: Array) -> Result<(), DiffError> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(DiffError::Shape(format!(
                "parameter {}: expected shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        e.init = Init::Given;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Overwrites every gradient slot: zeros first, then the supplied values.
    pub fn set_grads(&mut self, grads: &Gradients) {
        self.zero_grads();
        for (id, g) in grads.iter() {
            self.entries[id.0].grad.add_assign(g);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.grad.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// True when both stores hold the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Sparse gradient set keyed by parameter, produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Array>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Array) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Sums another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}
