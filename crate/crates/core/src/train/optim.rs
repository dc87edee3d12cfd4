//! Adam with bias correction and global-norm gradient clipping.

use crate::params::ParamSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `w` in place.
pub fn adam_step(w: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    debug_assert_eq!(w.len(), grad.len());
    debug_assert_eq!(w.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..w.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Scale every gradient by `max_norm / ||g||` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam over a whole [`ParamSet`], one state per named tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Apply `grads` (keyed like `params`); tensors without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(g.len()));
            adam_step(w.data_mut(), g, state, self.lr, self.beta1, self.beta2, self.eps);
        }
    }
}
