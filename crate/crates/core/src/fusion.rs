//! Multimodal fusion `u = [v, t, v*t, |v-t|]`, the activated hidden layer
//! `h = act(W1 u + b1)` and the rating head `y = W2 dropout(h) + b2`.
//!
//! Despite the "gated" name this fusion has no learned gate; the product and
//! absolute-difference blocks carry the agreement/disagreement signal.

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamSet};
use crate::tensor::{ActivationKind, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub activation: ActivationKind,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            hidden_dim: 512,
            activation: ActivationKind::Swish,
            dropout: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("fusion dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Concatenate `[v, t, v*t, |v-t|]` along the last axis.
pub fn fuse(g: &mut Graph, v: Var, t: Var) -> Result<Var> {
    if g.shape(v) != g.shape(t) {
        return Err(Error::dim(
            "fuse",
            format!("image width {:?} vs text width {:?}", g.shape(v), g.shape(t)),
        ));
    }
    let axis = g.shape(v).len() - 1;
    let prod = g.mul(v, t)?;
    let diff = g.sub(v, t)?;
    let diff = g.abs(diff)?;
    g.concat(&[v, t, prod, diff], axis)
}

/// [`fuse`] on plain vectors.
pub fn fuse_vectors(v: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    if v.len() != t.len() {
        return Err(Error::dim("fuse", format!("image width {} vs text width {}", v.len(), t.len())));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(v.to_vec()));
    let b = g.constant(Tensor::from_vec(t.to_vec()));
    let u = fuse(&mut g, a, b)?;
    Ok(g.value(u).data().to_vec())
}

#[derive(Debug, Clone)]
pub struct FusionHead {
    cfg: FusionConfig,
}

impl FusionHead {
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        params::init_linear(&mut p, "fusion.hidden", 4 * self.cfg.embed_dim, self.cfg.hidden_dim, rng);
        params::init_linear(&mut p, "head.out", self.cfg.hidden_dim, 1, rng);
        p
    }

    /// `h = act(W1 u + b1)`.
    pub fn fusion_forward(&self, g: &mut Graph, p: &Bound, u: Var) -> Result<Var> {
        let z = params::linear(g, p, "fusion.hidden", u)?;
        g.activate(z, self.cfg.activation)
    }

    /// `[B, hidden] -> [B, 1]`; dropout is active only when `train` is set.
    pub fn predict_rating<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = g.dropout(h, self.cfg.dropout, train, rng)?;
        params::linear(g, p, "head.out", h)
    }

    /// Full head from the two modality vectors.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        v: Var,
        t: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let u = fuse(g, v, t)?;
        let h = self.fusion_forward(g, p, u)?;
        self.predict_rating(g, p, h, train, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs() {
        assert_eq!(
            fuse_vectors(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn worked_example() {
        assert_eq!(
            fuse_vectors(&[2.0, -1.0], &[0.5, 3.0]).unwrap(),
            vec![2.0, -1.0, 0.5, 3.0, 1.0, -3.0, 1.5, 4.0]
        );
    }

    #[test]
    fn width_mismatch_names_both() {
        let err = fuse_vectors(&[1.0, 2.0], &[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn zero_input_zero_hidden_with_swish() {
        let head = FusionHead::new(FusionConfig {
            embed_dim: 3,
            hidden_dim: 5,
            ..FusionConfig::default()
        })
        .unwrap();
        let params = head.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let u = g.constant(Tensor::zeros(&[1, 12]));
        let h = head.fusion_forward(&mut g, &p, u).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_activation_is_affine() {
        let head = FusionHead::new(FusionConfig {
            embed_dim: 2,
            hidden_dim: 3,
            activation: ActivationKind::Identity,
            dropout: 0.0,
        })
        .unwrap();
        let params = head.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let u: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let uv = g.constant(Tensor::new(vec![1, 8], u.clone()).unwrap());
        let h = head.fusion_forward(&mut g, &p, uv).unwrap();
        let w = params.get("fusion.hidden.weight").unwrap().data();
        let b = params.get("fusion.hidden.bias").unwrap().data();
        for j in 0..3 {
            let expected: f64 = (0..8).map(|i| u[i] * w[i * 3 + j]).sum::<f64>() + b[j];
            assert!((g.value(h).data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_hidden_predicts_bias() {
        let head = FusionHead::new(FusionConfig {
            embed_dim: 2,
            hidden_dim: 4,
            ..FusionConfig::default()
        })
        .unwrap();
        let mut params = head.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        *params.get_mut("head.out.bias").unwrap() = Tensor::scalar(3.25);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let h = g.constant(Tensor::zeros(&[1, 4]));
        let y = head.predict_rating(&mut g, &p, h, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.value(y).data(), &[3.25]);
    }

    #[test]
    fn eval_mode_is_repeatable_and_train_mode_is_seeded() {
        let head = FusionHead::new(FusionConfig {
            embed_dim: 2,
            hidden_dim: 16,
            activation: ActivationKind::Swish,
            dropout: 0.5,
        })
        .unwrap();
        let params = head.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let h: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let run = |train: bool, seed: u64| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let hv = g.constant(Tensor::new(vec![1, 16], h.clone()).unwrap());
            let y = head
                .predict_rating(&mut g, &p, hv, train, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            g.value(y).data()[0]
        };
        assert_eq!(run(false, 1).to_bits(), run(false, 2).to_bits());
        assert_eq!(run(true, 7).to_bits(), run(true, 7).to_bits());
        assert_ne!(run(true, 7), run(false, 7));
    }
}
