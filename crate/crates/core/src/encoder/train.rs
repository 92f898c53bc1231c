// SPDX-License-Identifier: Apache-2.0

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{EncodedPatient, Model, Prox};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::seeds;

/// Plain SGD without momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

/// Shuffling stream for local training. Epoch `e` of a call shuffles with
/// `derive(seed, first_epoch + e)`, so splitting a run into several calls
/// with consecutive `first_epoch` values reproduces one long call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSchedule {
    pub seed: u64,
    pub first_epoch: u64,
}

impl TrainSchedule {
    pub fn new(seed: u64) -> Self {
        Self { seed, first_epoch: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LocalTrainOutput {
    pub params: ParamSet,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// One SGD step on the data loss with the proximal term handled in closed
/// form: `w' = (w - lr * g + lr * mu * anchor) / (1 + lr * mu)`. This
/// minimizes the linearized loss plus both quadratic terms exactly and stays
/// stable for any `mu`, unlike an explicit gradient step once `lr * mu > 2`.
fn proximal_step(params: &mut ParamSet, grad: &ParamSet, prox: Prox<'_>, lr: f64) {
    let shrink = 1.0 + lr * prox.mu;
    for ((w, g), a) in params.tensors.iter_mut().zip(&grad.tensors).zip(&prox.anchor.tensors) {
        if w.is_statistic() {
            continue;
        }
        for ((wi, gi), ai) in w.values.iter_mut().zip(&g.values).zip(&a.values) {
            *wi = (*wi - lr * gi + lr * prox.mu * ai) / shrink;
        }
    }
}

/// Local SGD over `data`. With `prox`, each step also pulls towards the
/// anchor (see [`proximal_step`]); `mu = 0` is exactly plain SGD.
pub fn train_local(
    model: &Model,
    params: &ParamSet,
    data: &[EncodedPatient],
    epochs: usize,
    optim: &OptimConfig,
    prox: Option<Prox<'_>>,
    schedule: TrainSchedule,
) -> Result<LocalTrainOutput> {
    if epochs == 0 {
        return Err(Error::InvalidInput("local training needs at least one epoch".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("local training on an empty dataset".into()));
    }
    if optim.batch_size == 0 || !(optim.learning_rate > 0.0) {
        return Err(Error::Config(format!("bad optimizer config {optim:?}")));
    }
    model.check(params)?;
    if let Some(p) = prox {
        params.check_layout(p.anchor)?;
    }
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let epoch = schedule.first_epoch + e as u64;
        order.sort_unstable();
        order.shuffle(&mut seeds::rng(seeds::derive(schedule.seed, &[0xe9, epoch])));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(optim.batch_size) {
            let batch: Vec<&EncodedPatient> = chunk.iter().map(|&i| &data[i]).collect();
            let out = model.grad(&params, &batch, None)?;
            match prox.filter(|p| p.mu != 0.0) {
                None => params.axpy_trainable(-optim.learning_rate, &out.grad),
                Some(p) => proximal_step(&mut params, &out.grad, p, optim.learning_rate),
            }
            model.update_running_stats(&mut params, &out.stats);
            total += out.loss;
            batches += 1;
        }
        if !params.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(LocalTrainOutput { params, epoch_losses })
}
