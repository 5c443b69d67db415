//! Mini-batch training with early stopping on validation balanced accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradMode, Model};
use crate::error::{Error, Result};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, LrSchedule};
use crate::par::Exec;
use crate::predictor::argmax;
use crate::stats::balanced_accuracy;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training stops once this many consecutive epochs fail to improve.
    pub patience: usize,
    pub optimizer: AdamConfig,
    /// Applied per update over the full `epochs` budget, so early stopping
    /// does not stretch it.
    pub schedule: LrSchedule,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            seed: 0,
            patience: 5,
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::default(),
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub stopped_early: bool,
}

/// Image with its integer class label.
pub type Example<'a> = (&'a Tensor, usize);

pub fn predict_labels(model: &Model, images: &[&Tensor], exec: Exec) -> Result<Vec<usize>> {
    exec.try_map(images.len(), |i| model.predict_proba(images[i]).map(|p| argmax(&p)))
}

fn evaluate(model: &Model, set: &[Example], exec: Exec) -> Result<f64> {
    let images: Vec<&Tensor> = set.iter().map(|e| e.0).collect();
    let truth: Vec<usize> = set.iter().map(|e| e.1).collect();
    let pred = predict_labels(model, &images, exec)?;
    balanced_accuracy(&truth, &pred, model.n_classes())
}

/// Mean loss and mean parameter gradient over `batch`. Per-example passes
/// may run concurrently; the reduction is in example order.
fn batch_gradient(model: &Model, batch: &[Example], exec: Exec) -> Result<(f64, Vec<Tensor>)> {
    let per_example = exec.try_map(batch.len(), |i| {
        let (image, label) = batch[i];
        model.forward(image, &[], GradMode::PARAMS)?.backward_loss(label)
    })?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = model
        .params()
        .values()
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    for r in per_example {
        loss += r.loss * scale;
        for (acc, g) in grads.iter_mut().zip(&r.param_grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v * scale;
            }
        }
    }
    Ok((loss, grads))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            reason: format!("non-finite value in `{op}`"),
        },
        other => other,
    }
}

/// Trains in place and leaves `model` holding the best-validation weights.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "training needs non-empty splits, got {} train and {} val",
            train_set.len(),
            val_set.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut state = AdamState::new(cfg.optimizer, &model.params().values().iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params().clone());
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, mut grads) = batch_gradient(model, &batch, exec).map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "loss is not finite".into(),
                });
            }
            total += loss * batch.len() as f64;
            let norm = clip_grad_norm(&mut grads, if cfg.grad_clip > 0.0 { cfg.grad_clip } else { f64::INFINITY });
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "gradient norm is not finite".into(),
                });
            }
            state.config.lr = cfg.schedule.rate(cfg.optimizer.lr, step, total_steps);
            step += 1;
            let mut params: Vec<&mut Tensor> = model.params_mut().values_mut().iter_mut().collect();
            adam_step(&mut params, &grads, &mut state)?;
        }
        let val = evaluate(model, val_set, exec).map_err(|e| diverged(epoch, e))?;
        history.push(EpochStats {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_balanced_accuracy: val,
        });
        if val > best.0 {
            best = (val, epoch, model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    *model.params_mut() = best.2;
    Ok(TrainReport {
        history,
        best_epoch: best.1,
        best_val_balanced_accuracy: best.0,
        stopped_early,
    })
}
