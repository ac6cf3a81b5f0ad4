use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::OptimState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BnPolicy, Model};
use crate::pipeline::config::TrainConfig;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean joint loss over the epoch's batches.
    pub loss: f64,
    pub supervised: f64,
    pub aux: f64,
    /// Source accuracy at the end of the epoch, running batchnorm statistics.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub source_accuracy: f64,
}

/// Fraction of examples of `ds` classified correctly.
pub fn accuracy(model: &Model, ds: &Dataset, bn: BnPolicy, batch_size: usize) -> Result<f64> {
    Ok(correct(model, ds, bn, batch_size)? as f64 / ds.len() as f64)
}

pub(crate) fn correct(model: &Model, ds: &Dataset, bn: BnPolicy, batch_size: usize) -> Result<usize> {
    let mut hits = 0;
    for idx in ds.chunks(batch_size) {
        let (x, y) = ds.batch(&idx)?;
        hits += model.predict(&x, bn)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(hits)
}

/// Mini-batch indices of one epoch: a seeded permutation split into batches
/// of `batch_size`; a trailing batch of a single example is dropped.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, &[rng::tag("epoch"), epoch as u64])));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Minimizes the joint objective on `source`.
pub fn train_source(model: &mut Model, source: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if source.len() < 2 {
        return Err(Error::invalid("source training needs at least two examples"));
    }
    if source.num_classes() != model.spec().num_classes {
        return Err(Error::ShapeMismatch {
            op: "train_source classes",
            lhs: vec![source.num_classes()],
            rhs: vec![model.spec().num_classes],
        });
    }
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let (mut loss, mut sup, mut aux, mut count) = (0.0, 0.0, 0.0, 0usize);
        for idx in epoch_batches(source.len(), cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = source.batch(&idx)?;
            let noise_seed = rng::derive(cfg.seed, &[rng::tag("noise"), step]);
            let l = model
                .train_step(&x, &y, &cfg.noise, noise_seed, &mut opt)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Divergence(format!("{op} went non-finite at epoch {epoch}, step {step}")),
                    other => other,
                })?;
            if !l.total.is_finite() {
                return Err(Error::Divergence(format!("loss {} at epoch {epoch}, step {step}", l.total)));
            }
            loss += l.total;
            sup += l.supervised;
            aux += l.aux;
            count += 1;
            step += 1;
        }
        let c = count.max(1) as f64;
        epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss / c,
            supervised: sup / c,
            aux: aux / c,
            accuracy: accuracy(model, source, BnPolicy::Running, 1024)?,
        });
    }
    let source_accuracy = epochs.last().map_or(0.0, |e| e.accuracy);
    Ok(TrainReport { epochs, source_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::model::ModelSpec;
    use crate::nce::NoiseConfig;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            optimizer: crate::autodiff::OptimKind::Adam,
            lr: 1e-2,
            milestones: vec![],
            decay: 0.1,
            noise: NoiseConfig::new(0.1, 0.3, 2).unwrap(),
            seed: 5,
        }
    }

    #[test]
    fn batches_cover_dataset_once() {
        let b = epoch_batches(70, 32, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
        assert_eq!(epoch_batches(65, 32, 1, 0).concat().len(), 64);
        assert_ne!(epoch_batches(70, 32, 1, 0), epoch_batches(70, 32, 1, 1));
    }

    #[test]
    fn separable_blobs_are_learned_deterministically() {
        let ds = make_blobs(2, 100, 2, 10.0, 3).unwrap();
        let spec = ModelSpec::mlp(2, &[8, 8], 2, 1, 2);
        let mut a = Model::new(spec.clone(), 1).unwrap();
        let ra = train_source(&mut a, &ds, &cfg(10)).unwrap();
        assert!(ra.source_accuracy >= 0.99, "{}", ra.source_accuracy);
        let mut b = Model::new(spec, 1).unwrap();
        let rb = train_source(&mut b, &ds, &cfg(10)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }
}
