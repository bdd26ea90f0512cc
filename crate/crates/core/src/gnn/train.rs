//! Mini-batch training and evaluation of [`GnnModel`].

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::graph::{denormalize_position, StarGraph};
use super::model::GnnModel;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::seed;
use crate::world::Room;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub step_size: f64,
    /// Training stops once an update moves no parameter by this much.
    pub tolerance: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            step_size: 1e-3,
            tolerance: 1e-6,
            max_epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_rmse_m: f64,
    pub val_rmse_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub converged: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Seeded 80/20 split of `0..n` into (train, validation) indices.
pub fn split_indices(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(split_seed, "gnn-split", &[]));
    let n_val = n / 5;
    let train = idx.split_off(n_val);
    (train, idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rmse_m: f64,
    pub errors_m: Vec<f64>,
}

/// Position errors in metres after denormalizing with the room extents.
pub fn evaluate(model: &GnnModel, dataset: &[&StarGraph], room: &Room) -> Result<Evaluation> {
    let errors_m = dataset
        .iter()
        .map(|g| {
            let label = g.label.ok_or_else(|| Error::Contract("evaluation graph has no label".into()))?;
            let est = denormalize_position(&model.forward(g)?, room);
            Ok((est - denormalize_position(&label, room)).norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    let rmse_m = if errors_m.is_empty() {
        f64::NAN
    } else {
        (errors_m.iter().map(|e| e * e).sum::<f64>() / errors_m.len() as f64).sqrt()
    };
    Ok(Evaluation { rmse_m, errors_m })
}

/// `(loss, rmse_m)` of a labeled set from one forward pass per graph; both
/// are NaN for an empty set.
fn set_metrics(model: &GnnModel, set: &[&StarGraph], room: &Room) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut sq) = (0.0, 0.0);
    for g in set {
        let label = g.label.ok_or_else(|| Error::Contract("evaluation graph has no label".into()))?;
        let y = model.forward(g)?;
        loss += (y[0] - label[0]).powi(2) + (y[1] - label[1]).powi(2);
        let e = (denormalize_position(&y, room) - denormalize_position(&label, room)).norm();
        sq += e * e;
    }
    let n = set.len() as f64;
    Ok((loss / n, (sq / n).sqrt()))
}

pub fn train(mut model: GnnModel, dataset: &[StarGraph], room: &Room, cfg: &TrainConfig) -> Result<(GnnModel, History)> {
    if cfg.batch_size == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::Config("batch size must be >= 1 and step size > 0".into()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} samples is smaller than the batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    if dataset.iter().any(|g| g.label.is_none()) {
        return Err(Error::Contract("training graph has no label".into()));
    }
    let (mut train_idx, val_idx) = split_indices(dataset.len(), cfg.seed);
    let train_set: Vec<&StarGraph> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&StarGraph> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let mut adam = Adam::new(model.param_count(), cfg.step_size);
    let mut shuffle_rng = seed::stream(cfg.seed, "gnn-batches", &[]);
    let mut history = History::default();

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut shuffle_rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch: Vec<&StarGraph> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (_, grads) = model.loss_and_gradients(&batch)?;
            let change = adam.step(model.params_mut(), &grads);
            history.steps += 1;
            if change < cfg.tolerance {
                history.converged = true;
                break;
            }
        }
        let (train_loss, train_rmse_m) = set_metrics(&model, &train_set, room)?;
        let (val_loss, val_rmse_m) = set_metrics(&model, &val_set, room)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_rmse_m,
            val_rmse_m,
        });
        if history.converged {
            break;
        }
    }
    Ok((model, history))
}
