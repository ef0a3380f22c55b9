//! Black-box terminal rewards and a query-counting wrapper.

pub mod compress;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::consistency::{DatasetKind, GaussianMixture2d, Patterns8x8};
use crate::error::{contract, Error, Result};
use crate::rng::stream;

pub use compress::{compress_proxy_size, compress_proxy_size_with_step, to_unit_interval};

/// A reward on terminal samples. Implementations must be deterministic in
/// `(sample, context)`.
pub trait Reward: Send + Sync {
    fn name(&self) -> &str;

    /// Whether concurrent evaluation is safe.
    fn is_pure(&self) -> bool {
        true
    }

    fn score(&self, sample: &[f64], context: usize) -> Result<f64>;
}

/// Counts every evaluation of the wrapped reward.
pub struct QueryCounter<R: ?Sized = dyn Reward> {
    count: AtomicU64,
    inner: Box<R>,
}

impl<R: Reward + ?Sized> QueryCounter<R> {
    pub fn new(inner: Box<R>) -> Self {
        Self {
            count: AtomicU64::new(0),
            inner,
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

impl<R: Reward + ?Sized> Reward for QueryCounter<R> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn is_pure(&self) -> bool {
        self.inner.is_pure()
    }

    fn score(&self, sample: &[f64], context: usize) -> Result<f64> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.score(sample, context)
    }
}

/// `∓` compression proxy size of the sample viewed as an `h×w` image.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressReward {
    pub h: usize,
    pub w: usize,
    pub step: f64,
    /// `true` rewards larger files.
    pub incompress: bool,
}

impl CompressReward {
    pub fn compress(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            step: compress::DEFAULT_STEP,
            incompress: false,
        }
    }

    pub fn incompress(h: usize, w: usize) -> Self {
        Self {
            incompress: true,
            ..Self::compress(h, w)
        }
    }

    /// Proxy size in bytes of a model sample.
    pub fn size_of(&self, sample: &[f64]) -> Result<f64> {
        compress_proxy_size_with_step(&to_unit_interval(sample), self.h, self.w, self.step)
    }
}

impl Reward for CompressReward {
    fn name(&self) -> &str {
        if self.incompress {
            "incompress"
        } else {
            "compress"
        }
    }

    fn score(&self, sample: &[f64], _context: usize) -> Result<f64> {
        let size = self.size_of(sample)?;
        Ok(if self.incompress { size } else { -size })
    }
}

pub fn reward_compress(image: &[f64], h: usize, w: usize) -> Result<f64> {
    Ok(-compress_proxy_size(image, h, w)?)
}

pub fn reward_incompress(image: &[f64], h: usize, w: usize) -> Result<f64> {
    compress_proxy_size(image, h, w)
}

/// `−‖x − g_c‖`.
#[derive(Clone, Debug, PartialEq)]
pub struct Target2d {
    pub goals: Vec<[f64; 2]>,
}

impl Target2d {
    pub fn for_mixture(ds: &GaussianMixture2d) -> Self {
        Self { goals: ds.goals() }
    }
}

impl Reward for Target2d {
    fn name(&self) -> &str {
        "target2d"
    }

    fn score(&self, sample: &[f64], context: usize) -> Result<f64> {
        let g = self
            .goals
            .get(context)
            .ok_or_else(|| contract(format!("no goal for context {context}")))?;
        if sample.len() != 2 {
            return Err(Error::Shape(format!("target reward needs a 2-D sample, got {}", sample.len())));
        }
        Ok(-((sample[0] - g[0]).powi(2) + (sample[1] - g[1]).powi(2)).sqrt())
    }
}

/// Frozen random scorer `w2·tanh(W1ᵀ[x, onehot(c)] + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlackboxMlp {
    dim: usize,
    contexts: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    pub seed: u64,
}

impl BlackboxMlp {
    pub const HIDDEN: usize = 32;

    pub fn new(dim: usize, contexts: usize, seed: u64) -> Self {
        let hidden = Self::HIDDEN;
        let fan_in = dim + contexts;
        let mut rng = stream(seed, 0);
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let w1 = draw(fan_in * hidden, 1.0 / (fan_in as f64).sqrt());
        let b1 = draw(hidden, 0.5);
        let w2 = draw(hidden, 1.0 / (hidden as f64).sqrt());
        let b2 = draw(1, 0.1)[0];
        Self {
            dim,
            contexts,
            hidden,
            w1,
            b1,
            w2,
            b2,
            seed,
        }
    }
}

impl Reward for BlackboxMlp {
    fn name(&self) -> &str {
        "blackbox"
    }

    fn score(&self, sample: &[f64], context: usize) -> Result<f64> {
        if sample.len() != self.dim {
            return Err(Error::Shape(format!("scorer expects {} values, got {}", self.dim, sample.len())));
        }
        if context >= self.contexts {
            return Err(contract(format!("context {context} outside vocabulary of {}", self.contexts)));
        }
        let mut out = self.b2;
        for j in 0..self.hidden {
            let mut z = self.b1[j];
            for (i, &x) in sample.iter().enumerate() {
                z += x * self.w1[i * self.hidden + j];
            }
            z += self.w1[(self.dim + context) * self.hidden + j];
            out += self.w2[j] * z.tanh();
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Compress,
    Incompress,
    Target2d,
    Blackbox,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Compress => "compress",
            TaskKind::Incompress => "incompress",
            TaskKind::Target2d => "target2d",
            TaskKind::Blackbox => "blackbox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Compress, Self::Incompress, Self::Target2d, Self::Blackbox]
            .into_iter()
            .find(|t| t.name() == s)
    }

    /// Builds the reward for samples from `dataset`.
    pub fn build(self, dataset: DatasetKind, scorer_seed: u64) -> Result<Box<dyn Reward>> {
        let side = Patterns8x8::SIDE;
        Ok(match (self, dataset) {
            (TaskKind::Compress, DatasetKind::Patterns8x8) => Box::new(CompressReward::compress(side, side)),
            (TaskKind::Incompress, DatasetKind::Patterns8x8) => Box::new(CompressReward::incompress(side, side)),
            (TaskKind::Target2d, DatasetKind::Mixture2d) => Box::new(Target2d::for_mixture(&GaussianMixture2d::default())),
            (TaskKind::Blackbox, kind) => {
                let ds = kind.build();
                Box::new(BlackboxMlp::new(ds.dim(), ds.contexts(), scorer_seed))
            }
            (task, kind) => {
                return Err(Error::Config(format!(
                    "task `{}` is not defined on dataset {kind:?}",
                    task.name()
                )))
            }
        })
    }
}
