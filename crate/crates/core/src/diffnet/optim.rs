use serde::{Deserialize, Serialize};

use super::{Array, DiffError, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied to the update (the stored gradients are not
    /// modified). `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub first: Vec<Array>,
    pub second: Vec<Array>,
    pub step: u64,
}

impl OptimState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| Array::zeros(e.value.shape())).collect();
        Self { first: zeros(), second: zeros(), step: 0 }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self { config, state: OptimState::for_store(store) }
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), DiffError> {
        let st = &mut self.state;
        if st.first.len() != store.len() {
            return Err(DiffError::OptimizerLayout(format!(
                "state tracks {} parameters, store has {}",
                st.first.len(),
                store.len()
            )));
        }
        for (k, e) in store.entries().iter().enumerate() {
            if st.first[k].shape() != e.grad.shape() {
                return Err(DiffError::OptimizerLayout(format!("shape mismatch for `{}`", e.name)));
            }
            if !e.grad.is_finite() {
                return Err(DiffError::OptimizerLayout(format!("non-finite gradient for `{}`", e.name)));
            }
        }
        let c = &self.config;
        let clip = match c.max_grad_norm {
            Some(max) => {
                let norm = store.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for k in 0..store.len() {
            let id = super::ParamId(k);
            let grad = store.grad(id).data().to_vec();
            let m = st.first[k].data_mut();
            let v = st.second[k].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
