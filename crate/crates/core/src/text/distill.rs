//! Teacher/student distillation losses and a small end-to-end demo.
//!
//! The total objective is `a_mlm * L_mlm + a_ce * L_ce + a_cos * L_cos`,
//! with the masked-LM weight applied explicitly.

use super::encoder::{TextEncoder, TextEncoderConfig, TextEncoderKind};
use super::vocab::{TokenBatch, MASK_ID};
use crate::error::{Error, Result};
use crate::params::{self, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::optim::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha_mlm: f64,
    pub alpha_ce: f64,
    pub alpha_cos: f64,
    pub temperature: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            alpha_mlm: 2.0,
            alpha_ce: 5.0,
            alpha_cos: 1.0,
            temperature: 2.0,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_mlm < 0.0 || self.alpha_ce < 0.0 || self.alpha_cos < 0.0 {
            return Err(Error::Config("distillation weights must be non-negative".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// A loss value with a flag for inputs where the loss is defined by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean negative log-likelihood of `targets[i]` under `log_probs[i]` over
/// the masked positions. An empty mask set gives `0` with the degenerate flag.
pub fn mlm_loss_var(
    g: &mut Graph,
    log_probs: Var,
    targets: &[u32],
    masked: &[usize],
) -> Result<(Var, bool)> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 || targets.len() != shape[0] {
        return Err(Error::dim(
            "mlm_loss",
            format!("log-probs {shape:?} vs {} targets", targets.len()),
        ));
    }
    if masked.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let vocab = shape[1];
    let mut onehot = vec![0.0; masked.len() * vocab];
    for (r, &pos) in masked.iter().enumerate() {
        let t = *targets
            .get(pos)
            .ok_or_else(|| Error::dim("mlm_loss", format!("masked position {pos} out of range")))?
            as usize;
        if t >= vocab {
            return Err(Error::dim("mlm_loss", format!("target {t} outside vocabulary {vocab}")));
        }
        onehot[r * vocab + t] = 1.0;
    }
    let rows = g.gather_rows(log_probs, masked)?;
    let onehot = g.constant(Tensor::new(vec![masked.len(), vocab], onehot)?);
    let picked = g.mul(rows, onehot)?;
    let total = g.sum(picked)?;
    Ok((g.scale(total, -1.0 / masked.len() as f64)?, false))
}

/// `-sum p_teacher^T * log p_student^T`, averaged over rows.
pub fn distill_ce_var(g: &mut Graph, teacher_logits: Var, student_logits: Var, temperature: f64) -> Result<Var> {
    if g.shape(teacher_logits) != g.shape(student_logits) {
        return Err(Error::dim(
            "distill_ce_loss",
            format!("{:?} vs {:?}", g.shape(teacher_logits), g.shape(student_logits)),
        ));
    }
    let rows = g.value(teacher_logits).numel() / g.shape(teacher_logits).last().copied().unwrap_or(1);
    let pt = g.softmax(teacher_logits, temperature)?;
    let ls = g.log_softmax(student_logits, temperature)?;
    let prod = g.mul(pt, ls)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / rows as f64)
}

/// `1 - cos(h_s, h_t)` averaged over rows of `[n, d]` (or a single `[d]`).
/// A row where either side has zero norm contributes exactly 1 and raises the flag.
pub fn cosine_loss_var(g: &mut Graph, hs: Var, ht: Var) -> Result<(Var, bool)> {
    if g.shape(hs) != g.shape(ht) {
        return Err(Error::dim("cosine_loss", format!("{:?} vs {:?}", g.shape(hs), g.shape(ht))));
    }
    let d = g.shape(hs).last().copied().unwrap_or(1);
    let n = g.value(hs).numel() / d;
    let (hs, ht) = (g.reshape(hs, &[n, d])?, g.reshape(ht, &[n, d])?);
    let dot = g.mul(hs, ht)?;
    let dot = g.sum_axis(dot, 1)?;
    let ss = g.mul(hs, hs)?;
    let ss = g.sum_axis(ss, 1)?;
    let tt = g.mul(ht, ht)?;
    let tt = g.sum_axis(tt, 1)?;
    let nn = g.mul(ss, tt)?;
    let denom = g.sqrt(nn)?;
    let fix: Vec<f64> = g.value(denom).data().iter().map(|&v| if v > 0.0 { 0.0 } else { 1.0 }).collect();
    let degenerate = fix.iter().any(|&f| f > 0.0);
    let fix = g.constant(Tensor::new(vec![n], fix)?);
    let denom = g.add(denom, fix)?;
    let cos = g.div(dot, denom)?;
    let mean_cos = g.mean(cos)?;
    let neg = g.neg(mean_cos)?;
    Ok((g.offset(neg, 1.0)?, degenerate))
}

pub fn triple_loss_var(g: &mut Graph, mlm: Var, ce: Var, cos: Var, w: &DistillWeights) -> Result<Var> {
    let a = g.scale(mlm, w.alpha_mlm)?;
    let b = g.scale(ce, w.alpha_ce)?;
    let c = g.scale(cos, w.alpha_cos)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

pub fn mlm_loss(log_probs: &Tensor, targets: &[u32], masked: &[usize]) -> Result<LossValue> {
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let (v, degenerate) = mlm_loss_var(&mut g, lp, targets, masked)?;
    Ok(LossValue {
        value: g.value(v).item()?,
        degenerate,
    })
}

pub fn distill_ce_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(teacher_logits.clone());
    let s = g.constant(student_logits.clone());
    let v = distill_ce_var(&mut g, t, s, temperature)?;
    g.value(v).item()
}

pub fn cosine_loss(hs: &Tensor, ht: &Tensor) -> Result<LossValue> {
    let mut g = Graph::new();
    let a = g.constant(hs.clone());
    let b = g.constant(ht.clone());
    let (v, degenerate) = cosine_loss_var(&mut g, a, b)?;
    Ok(LossValue {
        value: g.value(v).item()?,
        degenerate,
    })
}

pub fn triple_loss(mlm: f64, ce: f64, cos: f64, w: &DistillWeights) -> f64 {
    w.alpha_mlm * mlm + w.alpha_ce * ce + w.alpha_cos * cos
}

/// Settings for the teacher -> student demo on random token sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillDemoConfig {
    pub seed: u64,
    pub steps: usize,
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub mask_prob: f64,
    pub lr: f64,
    pub weights: DistillWeights,
}

impl Default for DistillDemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 40,
            vocab_size: 32,
            width: 16,
            heads: 2,
            seq_len: 10,
            batch_size: 6,
            teacher_layers: 4,
            student_layers: 2,
            mask_prob: 0.15,
            lr: 3e-3,
            weights: DistillWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: usize,
    pub mlm: f64,
    pub ce: f64,
    pub cos: f64,
    pub total: f64,
}

struct LmModel {
    encoder: TextEncoder,
    head: String,
}

impl LmModel {
    fn new(prefix: &str, cfg: &DistillDemoConfig, layers: usize) -> Result<Self> {
        let enc_cfg = TextEncoderConfig {
            vocab_size: cfg.vocab_size,
            width: cfg.width,
            layers,
            heads: cfg.heads,
            max_len: cfg.seq_len,
            output_dim: cfg.width,
            ffn_mult: 2,
            kind: TextEncoderKind::Transformer,
        };
        Ok(Self {
            encoder: TextEncoder::with_prefix(enc_cfg, prefix)?,
            head: format!("{prefix}.lm_head"),
        })
    }

    fn init(&self, rng: &mut ChaCha8Rng, width: usize, vocab: usize) -> ParamSet {
        let mut p = self.encoder.init_params(rng);
        params::init_linear(&mut p, &self.head, width, vocab, rng);
        // Random teachers need non-trivial positions to give the student something to match.
        for (name, t) in p.iter_mut() {
            if name.ends_with(".pos") {
                *t = Tensor::randn(t.shape(), 0.5, rng);
            }
        }
        p
    }

    /// `(hidden [B*L, w], logits [B*L, V])`.
    fn forward(&self, g: &mut Graph, p: &params::Bound, batch: &TokenBatch) -> Result<(Var, Var)> {
        let h = self.encoder.hidden_states(g, p, batch)?;
        let logits = params::linear(g, p, &self.head, h)?;
        Ok((h, logits))
    }
}

/// Train a 2-layer student against a frozen random 4-layer teacher with the
/// triple loss and return the per-step components.
pub fn run_distill_demo(cfg: &DistillDemoConfig) -> Result<Vec<DistillRecord>> {
    cfg.weights.validate()?;
    if cfg.vocab_size <= MASK_ID as usize + 2 || cfg.seq_len == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("distill demo needs vocab > 4, seq_len > 0, batch > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teacher = LmModel::new("teacher", cfg, cfg.teacher_layers)?;
    let student = LmModel::new("student", cfg, cfg.student_layers)?;
    let teacher_params = teacher.init(&mut rng, cfg.width, cfg.vocab_size);
    let mut student_params = student.init(&mut rng, cfg.width, cfg.vocab_size);
    let mut adam = Adam::new(cfg.lr);
    let first_word = MASK_ID as usize + 2;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let n = cfg.batch_size * cfg.seq_len;
        let targets: Vec<u32> = (0..n)
            .map(|_| rng.random_range(first_word..cfg.vocab_size) as u32)
            .collect();
        let mut masked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < cfg.mask_prob).collect();
        if masked.is_empty() {
            masked.push(rng.random_range(0..n));
        }
        let mut input = targets.clone();
        for &m in &masked {
            input[m] = MASK_ID;
        }
        let batch = TokenBatch {
            ids: input.chunks(cfg.seq_len).map(<[u32]>::to_vec).collect(),
            mask: vec![vec![1; cfg.seq_len]; cfg.batch_size],
            len: cfg.seq_len,
        };

        let (t_hidden, t_logits) = {
            let mut g = Graph::new();
            let p = teacher_params.bind(&mut g, false);
            let (h, l) = teacher.forward(&mut g, &p, &batch)?;
            (g.value(h).clone(), g.value(l).clone())
        };

        let mut g = Graph::new();
        let p = student_params.bind(&mut g, true);
        let (h, logits) = student.forward(&mut g, &p, &batch)?;
        let log_probs = g.log_softmax(logits, 1.0)?;
        let (mlm, _) = mlm_loss_var(&mut g, log_probs, &targets, &masked)?;
        let s_masked = g.gather_rows(logits, &masked)?;
        let t_logits = g.constant(t_logits);
        let t_masked = g.gather_rows(t_logits, &masked)?;
        let ce = distill_ce_var(&mut g, t_masked, s_masked, cfg.weights.temperature)?;
        let t_hidden = g.constant(t_hidden);
        let (cos, _) = cosine_loss_var(&mut g, h, t_hidden)?;
        let total = triple_loss_var(&mut g, mlm, ce, cos, &cfg.weights)?;
        let record = DistillRecord {
            step,
            mlm: g.value(mlm).item()?,
            ce: g.value(ce).item()?,
            cos: g.value(cos).item()?,
            total: g.value(total).item()?,
        };
        if !record.total.is_finite() {
            return Err(Error::Training(format!("non-finite distillation loss at step {step}")));
        }
        g.backward(total)?;
        let grads: BTreeMap<String, Vec<f64>> = p
            .iter()
            .filter_map(|(name, v)| g.grad(v).map(|gr| (name.to_string(), gr.to_vec())))
            .collect();
        adam.step(&mut student_params, &grads);
        history.push(record);
    }
    Ok(history)
}

pub fn write_distill_csv<W: Write>(records: &[DistillRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("distill csv", e))?;
    Ok(())
}
