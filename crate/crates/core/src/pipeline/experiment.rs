//! Experiment configs and their run directories.
//!
//! A run directory is named after a hash of everything that determines the
//! trained model (model spec, training config, source data). It holds
//!
//! - `config.json`: the experiment config as last used,
//! - `checkpoint.bin`: the trained model,
//! - `runrecord.json`: everything below plus wall-clock timings,
//! - `metrics.json`: the deterministic part of the run record,
//! - `accuracy_curve.csv`: accuracy per adaptation iteration, after `adapt`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{apply_shift, make_blobs, make_rings, Dataset, DatasetManifest, ShiftSpec};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, BnPolicy, Model, ModelSpec};
use crate::pipeline::adapt::{adapt_eval, ptbn_eval, AdaptReport};
use crate::pipeline::config::{AdaptConfig, TrainConfig};
use crate::pipeline::figures::{emit_figure_data, FigureKind, FigureParams};
use crate::pipeline::train::{accuracy, train_source, TrainReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_RECORD_FILE: &str = "runrecord.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CURVE_FILE: &str = "accuracy_curve.csv";

/// Where a dataset comes from. Synthetic sources are seeded with the
/// experiment seed plus `seed_offset`; `shift` is applied on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Manifest {
        path: PathBuf,
        #[serde(default)]
        shift: Option<ShiftSpec>,
    },
    Blobs {
        num_classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed_offset: u64,
        #[serde(default)]
        shift: Option<ShiftSpec>,
    },
    Rings {
        n: usize,
        noise: f64,
        #[serde(default)]
        seed_offset: u64,
        #[serde(default)]
        shift: Option<ShiftSpec>,
    },
}

impl DataSource {
    /// Materializes the dataset; relative manifest paths resolve against `base`.
    pub fn load(&self, base: &Path, seed: u64) -> Result<Dataset> {
        let (ds, shift, data_seed) = match self {
            DataSource::Manifest { path, shift } => {
                let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                (DatasetManifest::load_file(path)?, shift, seed)
            }
            DataSource::Blobs { num_classes, n_per_class, dim, separation, seed_offset, shift } => {
                let s = seed.wrapping_add(*seed_offset);
                (make_blobs(*num_classes, *n_per_class, *dim, *separation, s)?, shift, s)
            }
            DataSource::Rings { n, noise, seed_offset, shift } => {
                let s = seed.wrapping_add(*seed_offset);
                (make_rings(*n, *noise, s)?, shift, s)
            }
        };
        match shift {
            Some(sh) => apply_shift(&ds, sh, data_seed),
            None => Ok(ds),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    pub source: DataSource,
    pub target: DataSource,
}

fn short_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        let noise = &self.train.noise;
        if noise.dim != self.model.noise_dim() {
            return Err(Error::Config(format!(
                "train.noise.dim is {} but the model's noise space has dimension {}",
                noise.dim,
                self.model.noise_dim()
            )));
        }
        if noise.mode != self.model.discriminator.input {
            return Err(Error::Config("train.noise.mode differs from model.discriminator.input".into()));
        }
        if let Some(l) = self.adapt.attach_layer {
            if l != self.model.attach_layer {
                return Err(Error::Config(format!(
                    "adapt.attach_layer {l} differs from model.attach_layer {}",
                    self.model.attach_layer
                )));
            }
        }
        Ok(())
    }

    /// Hash of the parts that determine the trained model; names the run directory.
    pub fn training_hash(&self) -> Result<String> {
        short_hash(&(&self.model, &self.train, &self.source))
    }

    /// Hash of the whole config.
    pub fn config_hash(&self) -> Result<String> {
        short_hash(self)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub source_accuracy: f64,
    /// Unadapted target accuracy with running batchnorm statistics.
    pub target_accuracy: f64,
    pub ptbn_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptMetrics {
    pub config_hash: String,
    pub config: AdaptConfig,
    pub accuracy: f64,
    pub curve: Vec<f64>,
    pub batch_losses: Vec<Vec<f64>>,
    /// Source accuracy of the model after the adaptation pass.
    pub source_accuracy_after: f64,
}

/// Deterministic results of a run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub training_hash: String,
    pub seed: u64,
    pub train: Option<TrainReport>,
    pub eval: Option<EvalMetrics>,
    pub adapt: Option<AdaptMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Seconds per phase.
    pub wall_time_s: BTreeMap<String, f64>,
}

/// An experiment config together with the directory its relative paths refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, base: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Experiment { config, base: base.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Experiment::new(config, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn run_dir(&self, out: &Path) -> Result<PathBuf> {
        Ok(out.join(format!("run-{}", self.config.training_hash()?)))
    }

    pub fn source(&self) -> Result<Dataset> {
        self.config.source.load(&self.base, self.config.seed())
    }

    pub fn target(&self) -> Result<Dataset> {
        self.config.target.load(&self.base, self.config.seed())
    }

    /// Freshly initialized model trained on the source, without touching disk.
    pub fn train_model(&self) -> Result<(Model, TrainReport)> {
        let source = self.source()?;
        let mut model = Model::new(self.config.model.clone(), self.config.seed())?;
        let report = train_source(&mut model, &source, &self.config.train)?;
        Ok((model, report))
    }

    /// Adaptation of a trained model on the target, without touching disk.
    pub fn adapt_model(&self, model: &mut Model) -> Result<AdaptReport> {
        adapt_eval(model, &self.target()?, &self.config.adapt)
    }

    fn read_record(dir: &Path) -> Result<RunRecord> {
        let path = dir.join(RUN_RECORD_FILE);
        if path.exists() {
            Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
        } else {
            Ok(RunRecord::default())
        }
    }

    fn write_record(&self, dir: &Path, record: &RunRecord) -> Result<()> {
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;
        std::fs::write(dir.join(RUN_RECORD_FILE), serde_json::to_string_pretty(record)?)?;
        std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&record.metrics)?)?;
        Ok(())
    }

    /// Trains from scratch and persists checkpoint and records under `out`.
    pub fn train(&self, out: &Path) -> Result<RunRecord> {
        let dir = self.run_dir(out)?;
        std::fs::create_dir_all(&dir)?;
        let t0 = Instant::now();
        let (model, report) = self.train_model()?;
        save_checkpoint(dir.join(CHECKPOINT_FILE), &model)?;
        let record = RunRecord {
            metrics: Metrics {
                training_hash: self.config.training_hash()?,
                seed: self.config.seed(),
                train: Some(report),
                eval: None,
                adapt: None,
            },
            wall_time_s: BTreeMap::from([("train".to_string(), t0.elapsed().as_secs_f64())]),
        };
        self.write_record(&dir, &record)?;
        Ok(record)
    }

    /// The checkpointed model of this experiment, training it first if needed.
    pub fn trained(&self, out: &Path) -> Result<(Model, RunRecord)> {
        let dir = self.run_dir(out)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let record = if ckpt.exists() { Self::read_record(&dir)? } else { self.train(out)? };
        let model = load_checkpoint(&ckpt)?;
        if model.spec() != &self.config.model {
            return Err(Error::Checkpoint(format!("{} was trained with a different model spec", ckpt.display())));
        }
        Ok((model, record))
    }

    /// Unadapted source and target accuracy plus the prediction-time batchnorm baseline.
    pub fn eval(&self, out: &Path) -> Result<RunRecord> {
        let (model, mut record) = self.trained(out)?;
        let t0 = Instant::now();
        let bs = self.config.adapt.batch_size;
        let target = self.target()?;
        record.metrics.eval = Some(EvalMetrics {
            source_accuracy: accuracy(&model, &self.source()?, BnPolicy::Running, bs)?,
            target_accuracy: accuracy(&model, &target, BnPolicy::Running, bs)?,
            ptbn_accuracy: ptbn_eval(&model, &target, bs)?,
        });
        record.wall_time_s.insert("eval".into(), t0.elapsed().as_secs_f64());
        self.write_record(&self.run_dir(out)?, &record)?;
        Ok(record)
    }

    /// Episodic adaptation on the target; also writes the accuracy curve.
    pub fn adapt(&self, out: &Path) -> Result<RunRecord> {
        let (mut model, mut record) = self.trained(out)?;
        let t0 = Instant::now();
        let report = self.adapt_model(&mut model)?;
        let source_after = accuracy(&model, &self.source()?, BnPolicy::Running, self.config.adapt.batch_size)?;
        let dir = self.run_dir(out)?;
        let params = FigureParams { curve: report.curve.clone(), ..FigureParams::default() };
        emit_figure_data(FigureKind::AccuracyCurve, &params)?.write_csv(dir.join(CURVE_FILE))?;
        record.metrics.adapt = Some(AdaptMetrics {
            config_hash: self.config.config_hash()?,
            config: self.config.adapt.clone(),
            accuracy: report.accuracy,
            curve: report.curve,
            batch_losses: report.batch_losses,
            source_accuracy_after: source_after,
        });
        record.wall_time_s.insert("adapt".into(), t0.elapsed().as_secs_f64());
        self.write_record(&dir, &record)?;
        Ok(record)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::ShiftKind;
    use crate::nce::NoiseConfig;

    pub(crate) fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelSpec::mlp(2, &[6, 6], 3, 1, 2),
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                optimizer: crate::autodiff::OptimKind::Adam,
                lr: 1e-2,
                milestones: vec![],
                decay: 0.1,
                noise: NoiseConfig::new(0.5, 1.0, 2).unwrap(),
                seed: 4,
            },
            adapt: AdaptConfig { iterations: 2, batch_size: 16, ..AdaptConfig::default() },
            source: DataSource::Blobs { num_classes: 3, n_per_class: 20, dim: 2, separation: 5.0, seed_offset: 0, shift: None },
            target: DataSource::Blobs {
                num_classes: 3,
                n_per_class: 20,
                dim: 2,
                separation: 5.0,
                seed_offset: 1000,
                shift: Some(ShiftSpec::new(ShiftKind::Rotation, 3).unwrap()),
            },
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = tiny();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.train.noise.dim = 3;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut other = cfg.clone();
        other.adapt.iterations = 7;
        assert_eq!(other.training_hash().unwrap(), cfg.training_hash().unwrap());
        assert_ne!(other.config_hash().unwrap(), cfg.config_hash().unwrap());
        other.train.seed = 5;
        assert_ne!(other.training_hash().unwrap(), cfg.training_hash().unwrap());
    }

    #[test]
    fn run_directory_contents_are_reproducible() {
        let exp = Experiment::new(tiny(), ".").unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for out in [a.path(), b.path()] {
            exp.train(out).unwrap();
            exp.eval(out).unwrap();
            exp.adapt(out).unwrap();
        }
        let dir_a = exp.run_dir(a.path()).unwrap();
        let dir_b = exp.run_dir(b.path()).unwrap();
        for f in [CHECKPOINT_FILE, METRICS_FILE, CURVE_FILE, CONFIG_FILE] {
            assert_eq!(std::fs::read(dir_a.join(f)).unwrap(), std::fs::read(dir_b.join(f)).unwrap(), "{f}");
        }
        let m: Metrics = serde_json::from_slice(&std::fs::read(dir_a.join(METRICS_FILE)).unwrap()).unwrap();
        let (train, eval, adapt) = (m.train.unwrap(), m.eval.unwrap(), m.adapt.unwrap());
        assert_eq!(adapt.curve[0], eval.target_accuracy);
        assert_eq!(adapt.source_accuracy_after, eval.source_accuracy);
        assert_eq!(train.source_accuracy, eval.source_accuracy);
    }
}
