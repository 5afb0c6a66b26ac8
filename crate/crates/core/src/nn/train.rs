use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, InitScheme, MlpParams, Tape};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::pairwise_sum;
use crate::rng::{self, keyed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    /// Used only when a network is built from scratch.
    pub init_scheme: InitScheme,
    pub init_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Return the parameters of the epoch with the lowest training loss
    /// instead of the last epoch.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.005,
            shuffle_seed: 0,
            init_scheme: InitScheme::GlorotUniform,
            init_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be positive"));
        }
        if self.batch_size > dataset_len {
            return Err(Error::invalid(
                "train.batch_size",
                format!("{} exceeds the dataset size {dataset_len}", self.batch_size),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate", "must be positive"));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(name, "must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Training loss in both forms: the optimized mean squared distance and the
/// mean unsquared Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub mse: f64,
    pub mean_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: MlpParams,
    pub initial_loss: LossValue,
    pub final_loss: LossValue,
    /// Full-dataset loss after each epoch.
    pub epoch_losses: Vec<LossValue>,
    /// Epoch whose parameters were returned; `None` means the initial ones.
    pub best_epoch: Option<usize>,
}

fn check_shapes(params: &MlpParams, dataset: &Dataset) -> Result<()> {
    ensure_dim("network input vs record input", dataset.input_dim(), params.input_dim())?;
    ensure_dim("network output vs record target", dataset.target_dim(), params.output_dim())
}

/// Weighted mean of `|g(z) - y|^2` (and of `|g(z) - y|`) over the records.
pub fn supervised_loss(params: &MlpParams, dataset: &Dataset) -> Result<LossValue> {
    check_shapes(params, dataset)?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "must be nonempty"));
    }
    let per_record: Vec<(f64, f64, f64)> = (0..dataset.len())
        .into_par_iter()
        .with_min_len(256)
        .map_init(Tape::default, |tape, r| {
            let out = params.forward_taped(dataset.input(r), tape);
            let sq: f64 = out
                .iter()
                .zip(dataset.target(r))
                .map(|(o, y)| (o - y) * (o - y))
                .sum();
            let w = dataset.weight(r);
            (w * sq, w * sq.sqrt(), w)
        })
        .collect();
    let sq: Vec<f64> = per_record.iter().map(|t| t.0).collect();
    let nm: Vec<f64> = per_record.iter().map(|t| t.1).collect();
    let ws: Vec<f64> = per_record.iter().map(|t| t.2).collect();
    let wsum = pairwise_sum(&ws);
    if wsum <= 0.0 {
        return Err(Error::invalid("dataset", "record weights sum to zero"));
    }
    Ok(LossValue {
        mse: pairwise_sum(&sq) / wsum,
        mean_norm: pairwise_sum(&nm) / wsum,
    })
}

/// Mini-batch Adam on the weighted squared loss, starting from `params`.
///
/// With `keep_best` the returned loss never exceeds the initial one.
pub fn train(params: &MlpParams, dataset: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    check_shapes(params, dataset)?;
    config.validate(dataset.len())?;
    let initial_loss = supervised_loss(params, dataset)?;
    if !initial_loss.mse.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let np = params.param_count();
    let mut theta = params.clone();
    let mut first = vec![0.0; np];
    let mut second = vec![0.0; np];
    let mut grad = vec![0.0; np];
    let mut tape = Tape::default();
    let mut upstream = vec![0.0; dataset.target_dim()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut t = 0i32;

    let mut best = (initial_loss, None, params.clone());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = keyed(config.shuffle_seed, rng::domain::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let wsum: f64 = batch.iter().map(|&r| dataset.weight(r)).sum();
            if wsum <= 0.0 {
                continue;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &r in batch {
                let out = theta.forward_taped(dataset.input(r), &mut tape);
                let scale = 2.0 * dataset.weight(r) / wsum;
                for ((u, o), y) in upstream.iter_mut().zip(out).zip(dataset.target(r)) {
                    *u = scale * (o - y);
                }
                theta.backward_taped(&mut tape, &upstream, Some(&mut grad), None);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            t += 1;
            let c1 = 1.0 - config.beta1.powi(t);
            let c2 = 1.0 - config.beta2.powi(t);
            for (((p, f), s), g) in theta
                .params_mut()
                .iter_mut()
                .zip(first.iter_mut())
                .zip(second.iter_mut())
                .zip(&grad)
            {
                *f = config.beta1 * *f + (1.0 - config.beta1) * g;
                *s = config.beta2 * *s + (1.0 - config.beta2) * g * g;
                *p -= config.learning_rate * (*f / c1) / ((*s / c2).sqrt() + 1e-8);
            }
            if theta.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
        }
        let loss = supervised_loss(&theta, dataset)?;
        if !loss.mse.is_finite() {
            let last = order.len().div_ceil(config.batch_size) - 1;
            return Err(Error::NonFiniteLoss { epoch, batch: last });
        }
        epoch_losses.push(loss);
        if loss.mse < best.0.mse {
            best = (loss, Some(epoch), theta.clone());
        }
    }
    let (final_loss, best_epoch, params) = if config.keep_best {
        best
    } else {
        (*epoch_losses.last().expect("epochs > 0"), Some(config.epochs - 1), theta)
    };
    Ok(TrainReport {
        params,
        initial_loss,
        final_loss,
        epoch_losses,
        best_epoch,
    })
}
