//! Source training, episodic test-time adaptation, sweeps, figure data and
//! experiment persistence.

pub mod adapt;
pub mod config;
pub mod experiment;
pub mod figures;
pub mod sweep;
pub mod train;

pub use adapt::{adapt_eval, ptbn_eval, AdaptReport};
pub use config::{AdaptConfig, ResetPolicy, TrainConfig};
pub use experiment::{AdaptMetrics, DataSource, EvalMetrics, Experiment, ExperimentConfig, Metrics, RunRecord};
pub use figures::{emit_figure_data, FigureData, FigureKind, FigureParams, Heatmap};
pub use sweep::{cell_config, sweep, write_sweep_csv, SweepCell, SweepGrid, SweepRun};
pub use train::{accuracy, train_source, EpochRecord, TrainReport};
