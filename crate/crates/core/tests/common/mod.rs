#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uirate::fusion::{FusionConfig, FusionHead};
use uirate::image::{ImageEncoder, ImageEncoderConfig};
use uirate::tensor::grad_check;
use uirate::text::{TextEncoder, TextEncoderConfig, TextEncoderKind, TokenBatch, Vocabulary};
use uirate::{ActivationKind, Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduce `y` to a scalar with fixed pseudo-random weights, so that
/// shift-invariant outputs (softmax, layer norm) still have informative gradients.
pub fn wsum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(9_999));
    let c = g.constant(w);
    let p = g.mul(y, c)?;
    g.sum(p)
}

pub fn chk(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    grad_check(
        |g, v| {
            let y = f(g, v)?;
            wsum(g, y)
        },
        x,
        H,
    )
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Values bounded away from zero (for abs, div, sqrt).
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.3, 2.0, r);
    let signs = Tensor::uniform(shape, -1.0, 1.0, r);
    for (v, s) in t.data_mut().iter_mut().zip(signs.data()) {
        if *s < 0.0 {
            *v = -*v;
        }
    }
    t
}

/// Values away from the HSwish kinks at +-3.
fn smooth_points(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -2.9, 2.9, r);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v += 0.01;
        }
    }
    t
}

pub struct Case {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

macro_rules! case {
    ($name:expr, |$r:ident| $body:block) => {
        Case {
            name: $name,
            run: |$r: &mut ChaCha8Rng| -> Result<f64> { $body },
        }
    };
}

/// One finite-difference check per differentiable graph operation; each
/// returns the worst relative error over every input it differentiates.
pub fn op_cases() -> Vec<Case> {
    let mut cases = vec![
        case!("add", |r| {
            let (a, b) = (randn(&[3, 4], r), randn(&[3, 4], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.add(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.add(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("sub", |r| {
            let (a, b) = (randn(&[3, 4], r), randn(&[3, 4], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.sub(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.sub(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("mul", |r| {
            let (a, b) = (randn(&[3, 4], r), randn(&[3, 4], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.mul(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.mul(c, x) })?;
            let ee = chk(&a, |g, x| g.mul(x, x))?;
            Ok(ea.max(eb).max(ee))
        }),
        case!("div", |r| {
            let (a, b) = (randn(&[3, 4], r), away_from_zero(&[3, 4], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.div(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.div(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("add_row", |r| {
            let (a, b) = (randn(&[2, 3, 4], r), randn(&[4], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.add_row(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.add_row(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("mul_row", |r| {
            let (a, b) = (randn(&[2, 3, 4], r), randn(&[4], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.mul_row(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.mul_row(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("add_channel", |r| {
            let (a, b) = (randn(&[2, 3, 4, 4], r), randn(&[3], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.add_channel(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.add_channel(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("scale", |r| {
            let a = randn(&[5], r);
            chk(&a, |g, x| g.scale(x, -1.7))
        }),
        case!("offset", |r| {
            let a = randn(&[5], r);
            chk(&a, |g, x| g.offset(x, 0.3))
        }),
        case!("neg", |r| {
            let a = randn(&[5], r);
            chk(&a, |g, x| g.neg(x))
        }),
        case!("abs", |r| {
            let a = away_from_zero(&[6], r);
            chk(&a, |g, x| g.abs(x))
        }),
        case!("sqrt", |r| {
            let a = Tensor::uniform(&[6], 0.2, 3.0, r);
            chk(&a, |g, x| g.sqrt(x))
        }),
        case!("tanh", |r| {
            let a = randn(&[6], r);
            chk(&a, |g, x| g.tanh(x))
        }),
        case!("matmul", |r| {
            let (a, b) = (randn(&[3, 4], r), randn(&[4, 2], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.matmul(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.matmul(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("batch_matmul", |r| {
            let (a, b) = (randn(&[2, 3, 4], r), randn(&[2, 4, 2], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.batch_matmul(x, c) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.batch_matmul(c, x) })?;
            Ok(ea.max(eb))
        }),
        case!("permute", |r| {
            let a = randn(&[2, 3, 4], r);
            chk(&a, |g, x| g.permute(x, &[2, 0, 1]))
        }),
        case!("transpose", |r| {
            let a = randn(&[2, 3, 4], r);
            chk(&a, |g, x| g.transpose(x))
        }),
        case!("reshape", |r| {
            let a = randn(&[2, 6], r);
            chk(&a, |g, x| g.reshape(x, &[3, 4]))
        }),
        case!("concat", |r| {
            let (a, b) = (randn(&[2, 3], r), randn(&[2, 2], r));
            let ea = chk(&a, |g, x| { let c = g.constant(b.clone()); g.concat(&[x, c], 1) })?;
            let eb = chk(&b, |g, x| { let c = g.constant(a.clone()); g.concat(&[c, x], 1) })?;
            let e0 = chk(&a, |g, x| g.concat(&[x, x], 0))?;
            Ok(ea.max(eb).max(e0))
        }),
        case!("narrow", |r| {
            let a = randn(&[3, 5], r);
            chk(&a, |g, x| g.narrow(x, 1, 1, 3))
        }),
        case!("sum_axis", |r| {
            let a = randn(&[2, 3, 4], r);
            chk(&a, |g, x| g.sum_axis(x, 1))
        }),
        case!("mean_axis", |r| {
            let a = randn(&[2, 3, 4], r);
            chk(&a, |g, x| g.mean_axis(x, 2))
        }),
        case!("sum", |r| {
            let a = randn(&[2, 3], r);
            chk(&a, |g, x| g.sum(x))
        }),
        case!("mean", |r| {
            let a = randn(&[2, 3], r);
            chk(&a, |g, x| g.mean(x))
        }),
        case!("softmax", |r| {
            let a = randn(&[3, 5], r);
            let e1 = chk(&a, |g, x| g.softmax(x, 1.0))?;
            let e2 = chk(&a, |g, x| g.softmax(x, 2.0))?;
            Ok(e1.max(e2))
        }),
        case!("log_softmax", |r| {
            let a = randn(&[3, 5], r);
            let e1 = chk(&a, |g, x| g.log_softmax(x, 1.0))?;
            let e2 = chk(&a, |g, x| g.log_softmax(x, 2.0))?;
            Ok(e1.max(e2))
        }),
        case!("layer_norm", |r| {
            let a = randn(&[3, 6], r);
            let gain = randn(&[6], r);
            let bias = randn(&[6], r);
            let ex = chk(&a, |g, x| {
                let (ga, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
                g.layer_norm(x, ga, b, 1e-5)
            })?;
            let eg = chk(&gain, |g, x| {
                let (v, b) = (g.constant(a.clone()), g.constant(bias.clone()));
                g.layer_norm(v, x, b, 1e-5)
            })?;
            let eb = chk(&bias, |g, x| {
                let (v, ga) = (g.constant(a.clone()), g.constant(gain.clone()));
                g.layer_norm(v, ga, x, 1e-5)
            })?;
            Ok(ex.max(eg).max(eb))
        }),
        case!("dropout", |r| {
            let a = randn(&[4, 8], r);
            chk(&a, |g, x| g.dropout(x, 0.3, true, &mut rng(5)))
        }),
        case!("conv2d", |r| {
            let x = randn(&[2, 3, 6, 6], r);
            let w = randn(&[4, 3, 3, 3], r);
            let mut worst = 0.0f64;
            for stride in [1, 2] {
                let ex = chk(&x, |g, v| { let c = g.constant(w.clone()); g.conv2d(v, c, stride) })?;
                let ew = chk(&w, |g, v| { let c = g.constant(x.clone()); g.conv2d(c, v, stride) })?;
                worst = worst.max(ex).max(ew);
            }
            Ok(worst)
        }),
        case!("depthwise_conv2d", |r| {
            let x = randn(&[2, 3, 7, 7], r);
            let w = randn(&[3, 3, 3], r);
            let mut worst = 0.0f64;
            for stride in [1, 2] {
                let ex = chk(&x, |g, v| { let c = g.constant(w.clone()); g.depthwise_conv2d(v, c, stride) })?;
                let ew = chk(&w, |g, v| { let c = g.constant(x.clone()); g.depthwise_conv2d(c, v, stride) })?;
                worst = worst.max(ex).max(ew);
            }
            Ok(worst)
        }),
        case!("pointwise_conv2d", |r| {
            let x = randn(&[2, 3, 4, 4], r);
            let w = randn(&[5, 3], r);
            let ex = chk(&x, |g, v| { let c = g.constant(w.clone()); g.pointwise_conv2d(v, c) })?;
            let ew = chk(&w, |g, v| { let c = g.constant(x.clone()); g.pointwise_conv2d(c, v) })?;
            Ok(ex.max(ew))
        }),
        case!("global_avg_pool", |r| {
            let x = randn(&[2, 3, 4, 4], r);
            chk(&x, |g, v| g.global_avg_pool(v))
        }),
        case!("gather_rows", |r| {
            let t = randn(&[5, 3], r);
            chk(&t, |g, v| g.gather_rows(v, &[4, 0, 4, 2]))
        }),
        case!("linear", |r| {
            let (x, w, b) = (randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r));
            let ex = chk(&x, |g, v| { let (cw, cb) = (g.constant(w.clone()), g.constant(b.clone())); g.linear(v, cw, cb) })?;
            let ew = chk(&w, |g, v| { let (cx, cb) = (g.constant(x.clone()), g.constant(b.clone())); g.linear(cx, v, cb) })?;
            let eb = chk(&b, |g, v| { let (cx, cw) = (g.constant(x.clone()), g.constant(w.clone())); g.linear(cx, cw, v) })?;
            Ok(ex.max(ew).max(eb))
        }),
    ];
    cases.push(case!("activations", |r| {
        let a = smooth_points(&[12], r);
        let mut worst = 0.0f64;
        for kind in ActivationKind::ALL {
            worst = worst.max(chk(&a, |g, x| g.activate(x, kind))?);
        }
        Ok(worst)
    }));
    cases
}

pub fn tiny_image_config() -> ImageEncoderConfig {
    ImageEncoderConfig {
        input_size: 32,
        stem_channels: 4,
        stage_channels: [4, 8, 8],
        embed_dim: 6,
        expand_ratio: 2,
        block_activation: ActivationKind::HSwish,
    }
}

pub fn tiny_text_config(kind: TextEncoderKind) -> TextEncoderConfig {
    TextEncoderConfig {
        vocab_size: 20,
        width: 16,
        layers: 1,
        heads: 2,
        max_len: 6,
        output_dim: 6,
        ffn_mult: 2,
        kind,
    }
}

/// Image encoder output w.r.t. the input image and the projection weight.
pub fn image_encoder_error(seed: u64) -> Result<f64> {
    let enc = ImageEncoder::new(tiny_image_config())?;
    let params = enc.init_params(&mut rng(seed));
    // inputs well inside [-1, 1] keep most HSwish units off their kinks
    let img = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng(seed + 1));
    let e_img = chk(&img, |g, x| {
        let p = params.bind(g, false);
        enc.forward(g, &p, x)
    })?;
    let w = params.get("image.proj.weight").expect("proj").clone();
    let e_w = chk(&w, |g, x| {
        let mut p = params.bind(g, false);
        p.set("image.proj.weight", x);
        let img = g.constant(img.clone());
        enc.forward(g, &p, img)
    })?;
    Ok(e_img.max(e_w))
}

pub fn token_batch() -> TokenBatch {
    let vocab = Vocabulary::from_corpus(["good login screen", "bad map view", "plain settings"], 16);
    TokenBatch::encode(["good login screen now", "bad map", "plain"], &vocab, 6).expect("batch")
}

/// Text encoder output w.r.t. the embedding table and the first query projection.
pub fn text_encoder_error(kind: TextEncoderKind, seed: u64) -> Result<f64> {
    let enc = TextEncoder::new(tiny_text_config(kind))?;
    let params = enc.init_params(&mut rng(seed));
    let batch = token_batch();
    let mut worst = 0.0f64;
    let names: Vec<&str> = match kind {
        TextEncoderKind::Transformer => vec!["text.embed", "text.pos", "text.layer0.attn.q.weight", "text.layer0.ffn.up.weight"],
        TextEncoderKind::SimpleRecurrent => vec!["text.embed", "text.rnn.hidden.weight", "text.rnn.input.weight"],
    };
    for name in names {
        let mut t = params.get(name).unwrap_or_else(|| panic!("missing {name}")).clone();
        if name == "text.pos" {
            t = Tensor::randn(t.shape(), 0.5, &mut rng(seed + 7));
        }
        let e = chk(&t, |g, x| {
            let mut p = params.bind(g, false);
            p.set(name, x);
            enc.forward(g, &p, &batch)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Fusion head prediction w.r.t. both modality vectors.
pub fn fusion_path_error(seed: u64, activation: ActivationKind) -> Result<f64> {
    let head = FusionHead::new(FusionConfig {
        embed_dim: 5,
        hidden_dim: 7,
        activation,
        dropout: 0.2,
    })?;
    let params = head.init_params(&mut rng(seed));
    let v = Tensor::randn(&[3, 5], 1.0, &mut rng(seed + 1));
    let t = Tensor::randn(&[3, 5], 1.0, &mut rng(seed + 2));
    let ev = chk(&v, |g, x| {
        let p = params.bind(g, false);
        let tt = g.constant(t.clone());
        head.forward(g, &p, x, tt, true, &mut rng(3))
    })?;
    let et = chk(&t, |g, x| {
        let p = params.bind(g, false);
        let vv = g.constant(v.clone());
        head.forward(g, &p, vv, x, true, &mut rng(3))
    })?;
    Ok(ev.max(et))
}

/// Small end-to-end configuration for fast training tests.
pub fn tiny_model_config() -> uirate::train::ModelConfig {
    let mut c = uirate::train::ModelConfig::desk();
    c.image = ImageEncoderConfig {
        embed_dim: 16,
        ..tiny_image_config()
    };
    c.text = TextEncoderConfig {
        vocab_size: 64,
        width: 16,
        layers: 1,
        heads: 2,
        max_len: 8,
        output_dim: 16,
        ffn_mult: 2,
        kind: TextEncoderKind::Transformer,
    };
    c.fusion = FusionConfig {
        embed_dim: 16,
        hidden_dim: 16,
        activation: ActivationKind::Swish,
        dropout: 0.1,
    };
    c.epochs = 3;
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c
}

pub fn synthetic(dir: &std::path::Path, n: usize, seed: u64, size: usize) -> uirate::data::Manifest {
    let cfg = uirate::data::SyntheticConfig {
        n,
        seed,
        noise: 0.0,
        image_size: size,
    };
    uirate::data::generate_synthetic(&cfg, dir).expect("synthetic corpus").0
}

/// Straightforward two-pass reference metrics.
pub fn naive_metrics(y: &[f64], p: &[f64]) -> (f64, f64, f64, Option<f64>, Option<f64>) {
    let n = y.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..y.len() {
        abs += (y[i] - p[i]).abs();
        sq += (y[i] - p[i]).powi(2);
    }
    let my = y.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let spp: f64 = p.iter().map(|v| (v - mp).powi(2)).sum();
    let cov: f64 = y.iter().zip(p).map(|(a, b)| (a - my) * (b - mp)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sq / sst);
    let r = (sst > 0.0 && spp > 0.0).then(|| cov / (sst.sqrt() * spp.sqrt()));
    (abs / n, sq / n, (sq / n).sqrt(), r2, r)
}
