//! Experiment harness: configuration, checkpoints, metric files, figures
//! and the commands that tie them together.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod plot;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, ModelKind};
pub use commands::{cmd_ablate_horizon, cmd_eval_time_budget, cmd_finetune, cmd_plot, cmd_pretrain};
pub use config::{Arm, EvalConfig, ExperimentConfig, THREADS_ENV};
pub use metrics::{AblationRow, BudgetRow, LossRow, MetricsRow, TrajectoryRow};
