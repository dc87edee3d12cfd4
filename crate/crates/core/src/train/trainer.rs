use super::checkpoint::Checkpoint;
use super::config::{LossKind, ModelConfig};
use super::model::RatingModel;
use super::optim::{clip_gradients, Adam};
use crate::data::{preprocess_batch, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{compensated_sum, evaluate, MetricsReport, UNDEFINED};
use crate::params::ParamSet;
use crate::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

const EVAL_CHUNK: usize = 32;

/// Metrics for one split after one epoch, computed in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    /// Training objective over the split, on the training scale.
    pub loss: f64,
    /// Mean minibatch loss seen while stepping (train rows only).
    pub batch_loss: Option<f64>,
    /// Mean pre-clip gradient norm (train rows only).
    pub grad_norm: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation MAE (training MAE
    /// when there is no usable validation split), plus the full history.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Set when the validation split had fewer than two samples.
    pub val_missing: bool,
}

fn loss_var(g: &mut Graph, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let e = match kind {
        LossKind::Mse => g.mul(d, d)?,
        LossKind::Mae => g.abs(d)?,
    };
    g.mean(e)
}

fn loss_value(kind: LossKind, pred: &[f64], target: &[f64]) -> f64 {
    let terms = pred.iter().zip(target).map(|(p, t)| match kind {
        LossKind::Mse => (p - t) * (p - t),
        LossKind::Mae => (p - t).abs(),
    });
    compensated_sum(terms) / pred.len() as f64
}

struct Cached<'a> {
    images: &'a [Tensor],
    texts: &'a [String],
    ratings: &'a [f64],
}

fn predict_indices(model: &RatingModel, data: &Cached, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
        let texts: Vec<&str> = chunk.iter().map(|&i| data.texts[i].as_str()).collect();
        out.extend(model.predict_scaled(&imgs, &texts)?);
    }
    Ok(out)
}

fn eval_indices(model: &RatingModel, data: &Cached, idx: &[usize]) -> Result<(f64, MetricsReport)> {
    let scale = model.config().target_scale;
    let scaled = predict_indices(model, data, idx)?;
    let targets: Vec<f64> = idx.iter().map(|&i| scale.forward(data.ratings[i])).collect();
    let loss = loss_value(model.config().loss, &scaled, &targets);
    let raw_pred: Vec<f64> = scaled.iter().map(|&y| scale.inverse(y)).collect();
    let raw_true: Vec<f64> = idx.iter().map(|&i| data.ratings[i]).collect();
    Ok((loss, evaluate(&raw_true, &raw_pred)?))
}

fn load_images(manifest: &Manifest, size: usize) -> Result<Vec<Tensor>> {
    let paths: Vec<_> = manifest.samples.iter().map(|s| manifest.resolve(s)).collect();
    preprocess_batch(&paths, size).into_iter().collect()
}

/// Metrics of `model` on the samples at `indices` (evaluation mode, original scale).
pub fn evaluate_model(model: &RatingModel, manifest: &Manifest, indices: &[usize]) -> Result<MetricsReport> {
    let images = load_images(manifest, model.config().image.input_size)?;
    let texts: Vec<String> = manifest.samples.iter().map(|s| s.text()).collect();
    let ratings: Vec<f64> = manifest.samples.iter().map(|s| s.avg_rating).collect();
    let data = Cached {
        images: &images,
        texts: &texts,
        ratings: &ratings,
    };
    Ok(eval_indices(model, &data, indices)?.1)
}

pub fn train(manifest: &Manifest, cfg: &ModelConfig) -> Result<TrainOutcome> {
    train_with(manifest, cfg, |_| {})
}

/// Train, calling `on_epoch` for every history row as it is produced.
pub fn train_with(manifest: &Manifest, cfg: &ModelConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::Contract("cannot train on an empty manifest".into()));
    }
    let train_idx = manifest.indices(Split::Train);
    if train_idx.len() < 2 {
        return Err(Error::Contract(format!(
            "training split has {} samples, need at least 2",
            train_idx.len()
        )));
    }
    let val_idx = manifest.indices(Split::Val);
    let val_missing = val_idx.len() < 2;

    let images = load_images(manifest, cfg.image.input_size)?;
    let texts: Vec<String> = manifest.samples.iter().map(|s| s.text()).collect();
    let ratings: Vec<f64> = manifest.samples.iter().map(|s| s.avg_rating).collect();
    let data = Cached {
        images: &images,
        texts: &texts,
        ratings: &ratings,
    };

    let vocab = RatingModel::build_vocab(cfg, train_idx.iter().map(|&i| texts[i].as_str()));
    let mut model = RatingModel::new(cfg, vocab, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet, ChaCha8Rng)> = None;
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        let mut norms = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let x = g.constant(model.stack_images(&imgs)?);
            let chunk_texts: Vec<&str> = chunk.iter().map(|&i| texts[i].as_str()).collect();
            let tokens = model.tokens(&chunk_texts)?;
            let target: Vec<f64> = chunk.iter().map(|&i| cfg.target_scale.forward(ratings[i])).collect();
            let y = g.constant(Tensor::new(vec![chunk.len(), 1], target)?);
            let pred = model.forward(&mut g, &bound, x, &tokens, true, &mut rng)?;
            let loss = loss_var(&mut g, cfg.loss, pred, y)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                let keys: Vec<&str> = chunk.iter().map(|&i| manifest.samples[i].image_path.as_str()).collect();
                return Err(Error::Training(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {b} (samples {keys:?})"
                )));
            }
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, var) in bound.iter() {
                if let Some(gr) = g.grad(var) {
                    grads.insert(name.to_string(), gr.to_vec());
                }
            }
            let mut slices: Vec<&mut [f64]> = grads.values_mut().map(Vec::as_mut_slice).collect();
            norms.push(clip_gradients(&mut slices, cfg.grad_clip));
            adam.step(&mut model.params, &grads);
            batch_losses.push(value);
        }

        let (loss, metrics) = eval_indices(&model, &data, &train_idx)?;
        let train_mae = metrics.mae;
        let rec = EpochRecord {
            epoch,
            split: Split::Train,
            loss,
            batch_loss: Some(compensated_sum(batch_losses.iter().copied()) / batch_losses.len() as f64),
            grad_norm: Some(compensated_sum(norms.iter().copied()) / norms.len() as f64),
            metrics,
        };
        on_epoch(&rec);
        history.push(rec);

        let score = if val_missing {
            train_mae
        } else {
            let (loss, metrics) = eval_indices(&model, &data, &val_idx)?;
            let mae = metrics.mae;
            let rec = EpochRecord {
                epoch,
                split: Split::Val,
                loss,
                batch_loss: None,
                grad_norm: None,
                metrics,
            };
            on_epoch(&rec);
            history.push(rec);
            mae
        };
        if best.as_ref().is_none_or(|(s, ..)| score < *s) {
            best = Some((score, epoch, model.params.clone(), rng.clone()));
        }
    }

    let (_, best_epoch, params, best_rng) = best.expect("at least one epoch");
    model.params = params;
    let checkpoint = Checkpoint::from_model(&model, best_epoch, &best_rng, history.clone());
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_epoch,
        val_missing,
    })
}

pub const HISTORY_HEADER: [&str; 11] = [
    "epoch",
    "split",
    "loss",
    "batch_loss",
    "grad_norm",
    "mae",
    "mse",
    "rmse",
    "r2",
    "pearson_r",
    "n",
];

/// One CSV row per epoch per split.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HISTORY_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let undef = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| UNDEFINED.to_string());
    for r in history {
        let m = &r.metrics;
        out.write_record([
            r.epoch.to_string(),
            r.split.name().to_string(),
            r.loss.to_string(),
            opt(r.batch_loss),
            opt(r.grad_norm),
            m.mae.to_string(),
            m.mse.to_string(),
            m.rmse.to_string(),
            undef(m.r2),
            undef(m.pearson_r),
            m.n.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Io {
        path: "<history>".into(),
        source: e,
    })?;
    Ok(())
}
