//! Toy-scale training and measurement.

pub mod adam;
pub mod config;
pub mod cost;
pub mod gradcheck;
pub mod objective;
pub mod task;
pub mod train;

pub use adam::Adam;
pub use config::ExperimentConfig;
pub use cost::{ensure_iso_flop, flop_count, param_count, sparsity_ratio, ParamCount};
pub use task::{MixtureTask, TaskBatch};
pub use train::{eval_loss, run_experiment, train_step, Experiment, RunSummary, StepMetrics};
