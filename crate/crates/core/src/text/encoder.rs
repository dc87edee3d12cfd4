use super::vocab::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{self, fan_in_normal, Bound, ParamSet};
use crate::tensor::{ActivationKind, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextEncoderKind {
    Transformer,
    /// Elman recurrence, the stand-in for recurrent text baselines.
    SimpleRecurrent,
}

impl std::str::FromStr for TextEncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "simple-recurrent" | "recurrent" | "rnn" => Ok(Self::SimpleRecurrent),
            _ => Err(Error::Config(format!("unknown text encoder `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub output_dim: usize,
    pub ffn_mult: usize,
    pub kind: TextEncoderKind,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192 + 4,
            width: 256,
            layers: 2,
            heads: 4,
            max_len: 64,
            output_dim: 512,
            ffn_mult: 4,
            kind: TextEncoderKind::Transformer,
        }
    }
}

impl TextEncoderConfig {
    pub fn desk() -> Self {
        Self {
            vocab_size: 512,
            width: 64,
            layers: 2,
            heads: 4,
            max_len: 24,
            output_dim: 128,
            ffn_mult: 2,
            kind: TextEncoderKind::Transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.width == 0 || self.max_len == 0 || self.output_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        if self.kind == TextEncoderKind::Transformer && (self.heads == 0 || !self.width.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "embed width {} is not divisible by head count {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Mask-aware mean over the sequence axis: `[B, L, d]` -> `[B, d]`. Rows
/// with no real token pool to zero.
pub fn masked_mean_pool(g: &mut Graph, states: Var, mask: &[Vec<u8>]) -> Result<Var> {
    let shape = g.shape(states).to_vec();
    if shape.len() != 3 || shape[0] != mask.len() || mask.iter().any(|m| m.len() != shape[1]) {
        return Err(Error::dim(
            "masked_mean_pool",
            format!("states {shape:?} vs mask {}x{}", mask.len(), mask.first().map_or(0, Vec::len)),
        ));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let mut weights = Vec::with_capacity(b * l * d);
    for row in mask {
        let count = row.iter().filter(|&&m| m != 0).count();
        for &m in row {
            let w = if m != 0 { 1.0 / count as f64 } else { 0.0 };
            weights.extend(std::iter::repeat_n(w, d));
        }
    }
    let w = g.constant(Tensor::new(vec![b, l, d], weights)?);
    let weighted = g.mul(states, w)?;
    g.sum_axis(weighted, 1)
}

/// Caption encoder: contextual token states, masked mean pooling, then a
/// linear projection to `output_dim` and LayerNorm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    prefix: String,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        Self::with_prefix(cfg, "text")
    }

    /// Encoder whose parameters live under `prefix.` (used to hold a teacher
    /// and a student side by side).
    pub fn with_prefix(cfg: TextEncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let (w, v) = (self.cfg.width, self.cfg.vocab_size);
        p.insert(self.name("embed"), Tensor::randn(&[v, w], 1.0 / (w as f64).sqrt(), rng));
        match self.cfg.kind {
            TextEncoderKind::Transformer => {
                p.insert(self.name("pos"), Tensor::zeros(&[self.cfg.max_len, w]));
                let hidden = w * self.cfg.ffn_mult;
                for i in 0..self.cfg.layers {
                    let l = self.name(&format!("layer{i}"));
                    for proj in ["q", "k", "v", "o"] {
                        params::init_linear(&mut p, &format!("{l}.attn.{proj}"), w, w, rng);
                    }
                    params::init_layer_norm(&mut p, &format!("{l}.attn_norm"), w);
                    params::init_linear(&mut p, &format!("{l}.ffn.up"), w, hidden, rng);
                    params::init_linear(&mut p, &format!("{l}.ffn.down"), hidden, w, rng);
                    params::init_layer_norm(&mut p, &format!("{l}.ffn_norm"), w);
                }
            }
            TextEncoderKind::SimpleRecurrent => {
                p.insert(self.name("rnn.input.weight"), fan_in_normal(&[w, w], w, 1.0, rng));
                p.insert(self.name("rnn.hidden.weight"), fan_in_normal(&[w, w], w, 0.5, rng));
                p.insert(self.name("rnn.bias"), Tensor::zeros(&[w]));
            }
        }
        params::init_linear(&mut p, &self.name("proj"), w, self.cfg.output_dim, rng);
        params::init_layer_norm(&mut p, &self.name("norm"), self.cfg.output_dim);
        p
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.len > self.cfg.max_len {
            return Err(Error::dim(
                "encode_text",
                format!("sequence length {} exceeds max {}", batch.len, self.cfg.max_len),
            ));
        }
        for row in &batch.ids {
            if let Some(&bad) = row.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(Error::dim(
                    "encode_text",
                    format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
                ));
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        let ids: Vec<usize> = batch.ids.iter().flatten().map(|&i| i as usize).collect();
        g.gather_rows(p.get(&self.name("embed"))?, &ids)
    }

    /// Contextual states `[B * L, width]` (rows in batch-major order).
    pub fn hidden_states(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        self.check_batch(batch)?;
        match self.cfg.kind {
            TextEncoderKind::Transformer => self.transformer_states(g, p, batch),
            TextEncoderKind::SimpleRecurrent => self.recurrent_states(g, p, batch),
        }
    }

    fn transformer_states(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        let (b, l, w, heads) = (batch.batch_size(), batch.len, self.cfg.width, self.cfg.heads);
        let dh = w / heads;
        let tok = self.embed(g, p, batch)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.gather_rows(p.get(&self.name("pos"))?, &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut bias = Vec::with_capacity(b * heads * l * l);
        for row in &batch.mask {
            for _ in 0..heads {
                for _ in 0..l {
                    bias.extend(row.iter().map(|&m| if m != 0 { 0.0 } else { -1e9 }));
                }
            }
        }
        let bias = g.constant(Tensor::new(vec![b * heads, l, l], bias)?);
        let scale = 1.0 / (dh as f64).sqrt();

        for i in 0..self.cfg.layers {
            let pre = self.name(&format!("layer{i}"));
            let split = |g: &mut Graph, v: Var| -> Result<Var> {
                let v = g.reshape(v, &[b, l, heads, dh])?;
                let v = g.permute(v, &[0, 2, 1, 3])?;
                g.reshape(v, &[b * heads, l, dh])
            };
            let q = params::linear(g, p, &format!("{pre}.attn.q"), x)?;
            let k = params::linear(g, p, &format!("{pre}.attn.k"), x)?;
            let v = params::linear(g, p, &format!("{pre}.attn.v"), x)?;
            let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let kt = g.transpose(k)?;
            let scores = g.batch_matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.add(scores, bias)?;
            let att = g.softmax(scores, 1.0)?;
            let ctx = g.batch_matmul(att, v)?;
            let ctx = g.reshape(ctx, &[b, heads, l, dh])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b * l, w])?;
            let attn = params::linear(g, p, &format!("{pre}.attn.o"), ctx)?;
            let res = g.add(x, attn)?;
            x = params::layer_norm(g, p, &format!("{pre}.attn_norm"), res)?;

            let h = params::linear(g, p, &format!("{pre}.ffn.up"), x)?;
            let h = g.activate(h, ActivationKind::Gelu)?;
            let h = params::linear(g, p, &format!("{pre}.ffn.down"), h)?;
            let res = g.add(x, h)?;
            x = params::layer_norm(g, p, &format!("{pre}.ffn_norm"), res)?;
        }
        Ok(x)
    }

    fn recurrent_states(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        let (b, l, w) = (batch.batch_size(), batch.len, self.cfg.width);
        let emb = self.embed(g, p, batch)?;
        let emb = g.reshape(emb, &[b, l, w])?;
        let wx = p.get(&self.name("rnn.input.weight"))?;
        let wh = p.get(&self.name("rnn.hidden.weight"))?;
        let bias = p.get(&self.name("rnn.bias"))?;
        let mut h = g.constant(Tensor::zeros(&[b, w]));
        let mut states = Vec::with_capacity(l);
        for t in 0..l {
            let xt = g.narrow(emb, 1, t, 1)?;
            let xt = g.reshape(xt, &[b, w])?;
            let a = g.matmul(xt, wx)?;
            let r = g.matmul(h, wh)?;
            let pre = g.add(a, r)?;
            let pre = g.add_row(pre, bias)?;
            let fresh = g.tanh(pre)?;
            // Padded steps carry the previous state forward unchanged.
            let keep: Vec<f64> = batch
                .mask
                .iter()
                .flat_map(|m| std::iter::repeat_n(if m[t] != 0 { 1.0 } else { 0.0 }, w))
                .collect();
            let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = g.constant(Tensor::new(vec![b, w], keep)?);
            let hold = g.constant(Tensor::new(vec![b, w], hold)?);
            let a = g.mul(fresh, keep)?;
            let c = g.mul(h, hold)?;
            h = g.add(a, c)?;
            let s = g.reshape(h, &[b, 1, w])?;
            states.push(s);
        }
        let all = g.concat(&states, 1)?;
        g.reshape(all, &[b * l, w])
    }

    /// `[B, output_dim]` sentence vectors.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<Var> {
        let states = self.hidden_states(g, p, batch)?;
        let states = g.reshape(states, &[batch.batch_size(), batch.len, self.cfg.width])?;
        let pooled = masked_mean_pool(g, states, &batch.mask)?;
        let t = params::linear(g, p, &self.name("proj"), pooled)?;
        params::layer_norm(g, p, &self.name("norm"), t)
    }

    /// Evaluation-mode wrapper around [`TextEncoder::forward`].
    pub fn encode(&self, params: &ParamSet, batch: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, batch)?;
        Ok(g.value(out).clone())
    }
}
