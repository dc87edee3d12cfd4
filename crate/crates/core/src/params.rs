//! Named parameter storage and per-step binding onto a [`Graph`].

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

/// All weights of a model keyed by canonical layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Merge another set under its own names; duplicate names are rejected.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(Error::Config(format!("duplicate parameter `{k}`")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Put every tensor on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Replace one binding, e.g. to route a grad-checked input through a weight slot.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Normal init scaled by fan-in: `std = sqrt(gain / fan_in)`.
pub fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (gain / fan_in.max(1) as f64).sqrt(), rng)
}

/// Registers `{prefix}.weight` `[in, out]` and `{prefix}.bias` `[out]`.
pub fn init_linear<R: Rng + ?Sized>(p: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    p.insert(format!("{prefix}.weight"), fan_in_normal(&[fan_in, fan_out], fan_in, 1.0, rng));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

/// Registers `{prefix}.gain` (ones) and `{prefix}.bias` (zeros).
pub fn init_layer_norm(p: &mut ParamSet, prefix: &str, width: usize) {
    p.insert(format!("{prefix}.gain"), Tensor::full(&[width], 1.0));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}
