use serde::{Deserialize, Serialize};

use crate::autodiff::OptimKind;
use crate::error::{Error, Result};
use crate::model::BnPolicy;
use crate::nce::NoiseConfig;

/// Source training: mini-batch optimization of the joint objective with a
/// multi-step learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "adam")]
    pub optimizer: OptimKind,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "tenth")]
    pub decay: f64,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
}

fn adam() -> OptimKind {
    OptimKind::Adam
}

fn tenth() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2 for batchnorm".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("train.milestones must be strictly increasing".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("train.decay must be positive, got {}", self.decay)));
        }
        self.noise.validate().map_err(|e| Error::Config(format!("train.noise: {e}")))
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    /// Restore the source weights before every test batch.
    #[default]
    PerBatch,
    /// Keep adapting across batches.
    Never,
}

/// Test-time adaptation on the target stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default = "twenty")]
    pub iterations: usize,
    #[serde(default = "milli")]
    pub lr: f64,
    #[serde(default = "adam")]
    pub optimizer: OptimKind,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub reset: ResetPolicy,
    #[serde(default)]
    pub bn: BnPolicy,
    /// Must match the model's attach layer when given.
    #[serde(default)]
    pub attach_layer: Option<usize>,
}

fn twenty() -> usize {
    20
}

fn milli() -> f64 {
    1e-3
}

fn batch() -> usize {
    128
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iterations: twenty(),
            lr: milli(),
            optimizer: OptimKind::Adam,
            batch_size: batch(),
            reset: ResetPolicy::PerBatch,
            bn: BnPolicy::Batch,
            attach_layer: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("adapt.batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adapt.lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}
