use serde::{Deserialize, Serialize};

use crate::autodiff::OptimState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BnPolicy, Model};
use crate::pipeline::config::{AdaptConfig, ResetPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Accuracy after the configured number of iterations.
    pub accuracy: f64,
    /// Accuracy after `i` iterations, `i = 0..=K`. Entry 0 is the unadapted model.
    pub curve: Vec<f64>,
    /// Test loss before each adaptation step, per batch.
    pub batch_losses: Vec<Vec<f64>>,
    /// Model digest at the start of each batch, after any reset.
    pub batch_digests: Vec<String>,
}

/// Episodic test-time adaptation over `target` in dataset order.
///
/// Every batch is predicted after `0..=K` adaptation steps. Iteration 0 uses
/// the running batchnorm statistics, so `K = 0` is exactly the unadapted
/// evaluation; later iterations use `cfg.bn`. With the per-batch policy the
/// model is restored to its incoming state before every batch and once more
/// at the end.
pub fn adapt_eval(model: &mut Model, target: &Dataset, cfg: &AdaptConfig) -> Result<AdaptReport> {
    cfg.validate()?;
    if let Some(l) = cfg.attach_layer {
        if l != model.spec().attach_layer {
            return Err(Error::Config(format!(
                "adapt.attach_layer {l} differs from the model's attach layer {}",
                model.spec().attach_layer
            )));
        }
    }
    let source = model.snapshot();
    let k = cfg.iterations;
    let mut hits = vec![0usize; k + 1];
    let mut batch_losses = Vec::new();
    let mut batch_digests = Vec::new();
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr);
    for idx in target.chunks(cfg.batch_size) {
        if cfg.reset == ResetPolicy::PerBatch {
            model.restore(&source)?;
            opt = OptimState::new(cfg.optimizer, cfg.lr);
        }
        batch_digests.push(model.digest());
        let (x, y) = target.batch(&idx)?;
        let count = |p: Vec<usize>| p.iter().zip(&y).filter(|(a, b)| a == b).count();
        hits[0] += count(model.predict(&x, BnPolicy::Running)?);
        let mut losses = Vec::with_capacity(k);
        for hit in hits.iter_mut().skip(1) {
            losses.push(model.adapt_step(&x, cfg.bn, &mut opt)?);
            *hit += count(model.predict(&x, cfg.bn)?);
        }
        batch_losses.push(losses);
    }
    if cfg.reset == ResetPolicy::PerBatch {
        model.restore(&source)?;
    }
    let curve: Vec<f64> = hits.iter().map(|&h| h as f64 / target.len() as f64).collect();
    Ok(AdaptReport {
        accuracy: curve[k],
        curve,
        batch_losses,
        batch_digests,
    })
}

/// Prediction-time batchnorm baseline over `target` in batches of `batch_size`.
/// A trailing batch of one example has no batch statistics and falls back to
/// the running ones.
pub fn ptbn_eval(model: &Model, target: &Dataset, batch_size: usize) -> Result<f64> {
    let mut hits = 0;
    for idx in target.chunks(batch_size) {
        let (x, y) = target.batch(&idx)?;
        let pred = if idx.len() < 2 {
            model.predict(&x, BnPolicy::Running)?
        } else {
            model.ptbn_predict(&x)?
        };
        hits += pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / target.len() as f64)
}
