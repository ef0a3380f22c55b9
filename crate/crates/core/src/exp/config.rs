use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::{CtConfig, DatasetKind, ModelConfig};
use crate::diffusion::DsmConfig;
use crate::error::{Error, Result};
use crate::rewards::TaskKind;
use crate::trainer::TrainConfig;

/// Environment variable overriding `train.threads`.
pub const THREADS_ENV: &str = "RLCM_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    #[default]
    Rlcm,
    Ddpo,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Rlcm => "rlcm",
            Arm::Ddpo => "ddpo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Arm::Rlcm, Arm::Ddpo].into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per evaluation and the per-point cap of the time-budget sweep.
    pub samples: usize,
    pub seed: u64,
    pub horizons: Vec<usize>,
    /// Total time budgets in seconds; empty derives them from the measured
    /// diffusion per-trajectory cost.
    pub budgets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 1_000_003,
            horizons: vec![2, 4, 8],
            budgets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub arm: Arm,
    /// Defaults to the dataset the task is defined on.
    pub dataset: Option<DatasetKind>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub scorer_seed: u64,
    pub rho: f64,
    pub diffusion_steps: usize,
    pub model: ModelConfig,
    pub ct: CtConfig,
    pub dsm: DsmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Target2d,
            arm: Arm::Rlcm,
            dataset: None,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            scorer_seed: 7,
            rho: 7.0,
            diffusion_steps: 50,
            model: ModelConfig::default(),
            ct: CtConfig {
                iterations: 2000,
                ..CtConfig::default()
            },
            dsm: DsmConfig {
                iterations: 2000,
                ..DsmConfig::default()
            },
            train: TrainConfig {
                epochs: 500,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills derived fields and validates. Idempotent.
    pub fn resolve(&mut self) -> Result<()> {
        if self.dataset.is_none() {
            self.dataset = Some(match self.task {
                TaskKind::Compress | TaskKind::Incompress => DatasetKind::Patterns8x8,
                TaskKind::Target2d | TaskKind::Blackbox => DatasetKind::Mixture2d,
            });
        }
        self.validate()
    }

    pub fn dataset(&self) -> DatasetKind {
        self.dataset.unwrap_or(DatasetKind::Mixture2d)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Contract(m) => Error::Config(m),
            other => other,
        };
        self.model.validate().map_err(wrap)?;
        self.ct.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("`diffusion_steps` must be positive".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("`rho` must be positive".into()));
        }
        if self.eval.samples == 0 || self.eval.horizons.contains(&0) {
            return Err(Error::Config("evaluation sizes and horizons must be positive".into()));
        }
        // fails for task/dataset pairs that do not exist
        self.task.build(self.dataset(), self.scorer_seed)?;
        Ok(())
    }

    /// Applies the thread-count environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(THREADS_ENV) {
            self.train.threads = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        }
        Ok(())
    }

    /// Writes the resolved configuration into the output directory.
    pub fn archive(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let mut c = ExperimentConfig::default();
        c.resolve().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.dataset, Some(DatasetKind::Mixture2d));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("tsak = \"compress\"").unwrap_err();
        assert!(err.to_string().contains("tsak"));
        let err = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn task_picks_dataset() {
        let c = ExperimentConfig::from_toml("task = \"compress\"").unwrap();
        assert_eq!(c.dataset, Some(DatasetKind::Patterns8x8));
        assert!(ExperimentConfig::from_toml("task = \"compress\"\ndataset = \"mixture2d\"").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nclip_range = 2.0").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
    }
}
