//! Grid sweep over attach layer × in-distribution noise scale, repeated over seeds.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, std_dev};
use crate::pipeline::experiment::{Experiment, ExperimentConfig};
use crate::pipeline::figures::csv_error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub attach_layers: Vec<usize>,
    pub sigma_s: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.attach_layers.is_empty() || self.sigma_s.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid needs at least one layer, one sigma_s and one seed".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(usize, f64)> {
        self.attach_layers
            .iter()
            .flat_map(|&l| self.sigma_s.iter().map(move |&s| (l, s)))
            .collect()
    }
}

/// Result of one (layer, sigma_s, seed) run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub source: f64,
    pub unadapted: f64,
    pub adapted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub attach_layer: usize,
    pub sigma_s: f64,
    pub sigma_o: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
}

#[derive(Serialize)]
struct CsvRow {
    attach_layer: usize,
    sigma_s: f64,
    sigma_o: f64,
    seeds: usize,
    source_mean: f64,
    source_std: f64,
    unadapted_mean: f64,
    unadapted_std: f64,
    adapted_mean: f64,
    adapted_std: f64,
}

impl SweepCell {
    fn stat(&self, f: impl Fn(&SweepRun) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.runs.iter().map(f).collect();
        (mean(&v), std_dev(&v))
    }

    pub fn adapted(&self) -> (f64, f64) {
        self.stat(|r| r.adapted)
    }
}

/// The base config with the attach layer, noise scales and seed replaced.
///
/// `sigma_o` keeps the base ratio `sigma_o / sigma_s`; when either scale is
/// zero the base `sigma_o` is kept instead.
pub fn cell_config(base: &ExperimentConfig, attach_layer: usize, sigma_s: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.model.attach_layer = attach_layer;
    if cfg.adapt.attach_layer.is_some() {
        cfg.adapt.attach_layer = Some(attach_layer);
    }
    let noise = &mut cfg.train.noise;
    if noise.sigma_s > 0.0 && sigma_s > 0.0 {
        noise.sigma_o *= sigma_s / noise.sigma_s;
    }
    noise.sigma_s = sigma_s;
    cfg.train.seed = seed;
    cfg
}

pub fn run_one(exp: &Experiment, cfg: ExperimentConfig) -> Result<SweepRun> {
    let exp = Experiment::new(cfg, exp.base.clone())?;
    let (mut model, train) = exp.train_model()?;
    let report = exp.adapt_model(&mut model)?;
    Ok(SweepRun {
        source: train.source_accuracy,
        unadapted: report.curve[0],
        adapted: report.accuracy,
    })
}

/// Runs every cell of `grid` for every seed on up to `jobs` worker threads.
/// Results do not depend on `jobs`.
pub fn sweep(exp: &Experiment, grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepCell>> {
    grid.validate()?;
    let cells = grid.cells();
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let configs: Vec<ExperimentConfig> = tasks
        .iter()
        .map(|&(c, seed)| cell_config(&exp.config, cells[c].0, cells[c].1, seed))
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let results: Mutex<Vec<Option<Result<SweepRun>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = run_one(exp, configs[i].clone());
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let mut runs = results.into_inner().expect("worker panicked").into_iter();
    cells
        .iter()
        .enumerate()
        .map(|(c, &(layer, sigma_s))| {
            let sigma_o = configs[c * grid.seeds.len()].train.noise.sigma_o;
            let cell_runs = (&mut runs)
                .take(grid.seeds.len())
                .map(|r| r.expect("every task ran"))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepCell {
                attach_layer: layer,
                sigma_s,
                sigma_o,
                seeds: grid.seeds.clone(),
                runs: cell_runs,
            })
        })
        .collect()
}

/// One row per cell: mean and sample standard deviation over seeds.
pub fn write_sweep_csv(cells: &[SweepCell], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for c in cells {
        let (source_mean, source_std) = c.stat(|r| r.source);
        let (unadapted_mean, unadapted_std) = c.stat(|r| r.unadapted);
        let (adapted_mean, adapted_std) = c.adapted();
        w.serialize(CsvRow {
            attach_layer: c.attach_layer,
            sigma_s: c.sigma_s,
            sigma_o: c.sigma_o,
            seeds: c.runs.len(),
            source_mean,
            source_std,
            unadapted_mean,
            unadapted_std,
            adapted_mean,
            adapted_std,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
