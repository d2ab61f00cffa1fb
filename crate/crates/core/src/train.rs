//! Optimization loop, evaluation metrics and the mean baseline.

use std::time::Instant;

use mmists_autodiff::{Adam, AdamConfig, AutodiffError, Graph, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::PreparedSample;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement; `0`
    /// disables early stopping like `None`.
    pub patience: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 100,
            patience: Some(20),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
        for (p, t) in pairs {
            let d = p - t;
            se += d * d;
            ae += d.abs();
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyQuerySet);
        }
        Ok(Self {
            mse: se / count as f64,
            mae: ae / count as f64,
            count,
        })
    }

    /// MSE in units of `1e-3`.
    pub fn scaled_mse(&self) -> f64 {
        self.mse * 1e3
    }

    /// MAE in units of `1e-2`.
    pub fn scaled_mae(&self) -> f64 {
        self.mae * 1e2
    }
}

/// Prediction/target pairs over all queries; with `denormalize`, both are
/// mapped back to raw units first.
pub fn prediction_pairs(model: &Model, samples: &[PreparedSample], denormalize: Option<&Normalizer>) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for s in samples.iter().filter(|s| !s.queries.is_empty()) {
        let preds = model.predict(s)?;
        for (p, q) in preds.into_iter().zip(&s.queries) {
            pairs.push(match denormalize {
                Some(n) => (n.invert(p, q.var), n.invert(q.target, q.var)),
                None => (p, q.target),
            });
        }
    }
    Ok(pairs)
}

pub fn evaluate(model: &Model, samples: &[PreparedSample], split: &'static str) -> Result<Metrics> {
    evaluate_with(model, samples, split, None)
}

pub fn evaluate_with(
    model: &Model,
    samples: &[PreparedSample],
    split: &'static str,
    denormalize: Option<&Normalizer>,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(split));
    }
    Metrics::from_pairs(prediction_pairs(model, samples, denormalize)?)
}

/// Per-variable training mean, which is zero after normalization.
pub fn mean_baseline(samples: &[PreparedSample], split: &'static str) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(split));
    }
    Metrics::from_pairs(samples.iter().flat_map(|s| s.queries.iter().map(|q| (0.0, q.target))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean squared error over the epoch's training queries, before each
    /// batch's update.
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    /// Wall-clock time; not part of the deterministic record.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation MSE of the restored parameters, or training loss without a
    /// validation split.
    pub best_score: f64,
    pub stopped_early: bool,
}

fn non_finite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Autodiff(AutodiffError::NonFiniteResult { .. }) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// One optimizer step over `batch`; returns the summed squared error.
fn train_batch(model: &mut Model, adam: &mut Adam, batch: &[&PreparedSample], epoch: usize, index: usize) -> Result<f64> {
    let total: usize = batch.iter().map(|s| s.queries.len()).sum();
    model.store.zero_grad();
    let mut sse = 0.0;
    for s in batch {
        let grads = {
            let mut g = Graph::with_params(&model.store);
            let (loss, _) = model.loss(&mut g, s, total as f64).map_err(|e| non_finite(e, epoch, index))?;
            let v = g.value(loss).item().expect("scalar loss");
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: index });
            }
            sse += v * total as f64;
            g.backward(loss)?
        };
        model.store.accumulate(&grads);
    }
    adam.step(&mut model.store);
    Ok(sse)
}

/// Trains `model` in place and restores the best parameters at the end.
/// Batches are reshuffled each epoch from the `"train"` stream of `seed`.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    let usable: Vec<&PreparedSample> = train_set.iter().filter(|s| !s.queries.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    for s in &usable {
        model.check_sample(s)?;
    }
    let total_queries: usize = usable.iter().map(|s| s.queries.len()).sum();
    let mut adam = Adam::new(config.adam(), &model.store)?;
    let mut rng = rng_for(seed, "train");
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for (i, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&j| usable[j]).collect();
            sse += train_batch(model, &mut adam, &batch, epoch, i)?;
        }
        let train_loss = sse / total_queries as f64;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, "val")?)
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_mse: val.map(|m| m.mse),
            val_mae: val.map(|m| m.mae),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        // without validation data the freshest parameters are kept
        let score = entry.val_mse.unwrap_or(entry.train_loss);
        let improved = match (entry.val_mse, &best) {
            (Some(v), Some((b, _, _))) => v < *b,
            _ => true,
        };
        log.push(entry);
        if improved {
            best = Some((score, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| p > 0 && stale >= p) {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_score, best_epoch, params) = best.expect("at least one epoch ran");
    if best_epoch != log.len() {
        model.store.copy_values_from(&params)?;
    }
    Ok(TrainReport {
        log,
        best_epoch,
        best_score,
        stopped_early,
    })
}
