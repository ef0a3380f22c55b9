//! Comma-delimited metric files with a header row.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EpochMetrics;

/// One fine-tuning epoch of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub arm: String,
    pub seed: u64,
    pub epoch: usize,
    pub reward_queries: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub surrogate: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub policy_steps: usize,
    pub model_calls: usize,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn new(task: &str, arm: &str, seed: u64, m: &EpochMetrics) -> Self {
        Self {
            task: task.to_string(),
            arm: arm.to_string(),
            seed,
            epoch: m.epoch,
            reward_queries: m.reward_queries,
            reward_mean: m.reward_mean,
            reward_std: m.reward_std,
            surrogate: m.surrogate,
            grad_norm: m.grad_norm,
            clip_fraction: m.clip_fraction,
            policy_steps: m.policy_steps,
            model_calls: m.model_calls,
            cpu_seconds: m.cpu_seconds,
            wall_seconds: m.wall_seconds,
        }
    }

    /// The row with its timing columns zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            cpu_seconds: 0.0,
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Pretraining loss, one row per logging interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub loss: f64,
}

/// Final quality and sampling cost of one fine-tuned horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub seed: u64,
    pub horizon: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub infer_seconds: f64,
}

/// One sequentially generated trajectory and its cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub task: String,
    pub arm: String,
    pub seed: u64,
    pub index: usize,
    pub seconds: f64,
    pub reward: f64,
}

/// Mean reward of the trajectories that complete within a total budget.
/// `reward_mean` is empty when none complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub task: String,
    pub arm: String,
    pub seed: u64,
    pub budget_seconds: f64,
    pub completed: usize,
    pub reward_mean: Option<f64>,
}

/// File name of the metrics for one `(task, arm, seed)`.
pub fn metrics_path(dir: &Path, task: &str, arm: &str, seed: u64) -> PathBuf {
    dir.join(format!("metrics_{task}_{arm}_seed{seed}.csv"))
}

/// Append-only writer; every row is flushed as it is written.
pub struct CsvAppender<T> {
    inner: csv::Writer<File>,
    _row: std::marker::PhantomData<T>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: match kind {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                other => format!("{other:?}"),
            },
        },
    }
}

impl<T: Serialize> CsvAppender<T> {
    /// Starts a fresh file, replacing any previous run's rows.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            inner: csv::Writer::from_writer(f),
            _row: std::marker::PhantomData,
        })
    }

    pub fn append(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_error(Path::new(""), e))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = CsvAppender::create(path)?;
    for r in rows {
        w.append(r)?;
    }
    Ok(())
}

/// Reads every row; a malformed row is reported with its line number.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut r = csv::Reader::from_reader(f);
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}
