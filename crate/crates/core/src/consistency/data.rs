//! Synthetic conditional datasets.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Samples with their context ids, `x` flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub contexts: Vec<usize>,
    pub dim: usize,
}

pub trait Dataset: Send + Sync {
    fn dim(&self) -> usize;
    fn contexts(&self) -> usize;
    fn sample_one(&self, rng: &mut dyn RngCore, context: usize, out: &mut Vec<f64>);

    /// `n` samples with uniformly drawn contexts.
    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Batch {
        let mut x = Vec::with_capacity(n * self.dim());
        let mut contexts = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..self.contexts());
            self.sample_one(rng, c, &mut x);
            contexts.push(c);
        }
        Batch {
            x,
            contexts,
            dim: self.dim(),
        }
    }
}

/// Eight isotropic Gaussians on a circle. Context `c` selects the pair of
/// adjacent components `{2c, 2c+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture2d {
    pub radius: f64,
    pub std: f64,
}

impl Default for GaussianMixture2d {
    fn default() -> Self {
        Self {
            radius: 1.0,
            std: 0.08,
        }
    }
}

impl GaussianMixture2d {
    pub const COMPONENTS: usize = 8;

    pub fn component_mean(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / Self::COMPONENTS as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    /// Goal point per context used by the 2-D target reward: the first
    /// component of the context's pair.
    pub fn goals(&self) -> Vec<[f64; 2]> {
        (0..self.contexts()).map(|c| self.component_mean(2 * c)).collect()
    }
}

impl Dataset for GaussianMixture2d {
    fn dim(&self) -> usize {
        2
    }

    fn contexts(&self) -> usize {
        Self::COMPONENTS / 2
    }

    fn sample_one(&self, rng: &mut dyn RngCore, context: usize, out: &mut Vec<f64>) {
        let k = 2 * context + rng.random_range(0..2);
        let m = self.component_mean(k);
        for mi in m {
            let z: f64 = StandardNormal.sample(rng);
            out.push(mi + self.std * z);
        }
    }
}

/// 8×8 binary images mapped to `{-1, 1}`: context 0 stripes, 1 disks,
/// 2 checkerboards, each with random geometry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Patterns8x8;

impl Patterns8x8 {
    pub const SIDE: usize = 8;
}

impl Dataset for Patterns8x8 {
    fn dim(&self) -> usize {
        Self::SIDE * Self::SIDE
    }

    fn contexts(&self) -> usize {
        3
    }

    fn sample_one(&self, rng: &mut dyn RngCore, context: usize, out: &mut Vec<f64>) {
        let n = Self::SIDE;
        let on = |v: bool| if v { 1.0 } else { -1.0 };
        match context {
            0 => {
                let width = [1usize, 2, 4][rng.random_range(0..3)];
                let phase = rng.random_range(0..2 * width);
                let vertical = rng.random_bool(0.5);
                for r in 0..n {
                    for c in 0..n {
                        let k = if vertical { c } else { r };
                        out.push(on(((k + phase) / width) % 2 == 0));
                    }
                }
            }
            1 => {
                let cx = rng.random_range(2.0..6.0);
                let cy = rng.random_range(2.0..6.0);
                let rad: f64 = rng.random_range(1.5..3.0);
                for r in 0..n {
                    for c in 0..n {
                        let dx = c as f64 + 0.5 - cx;
                        let dy = r as f64 + 0.5 - cy;
                        out.push(on(dx * dx + dy * dy <= rad * rad));
                    }
                }
            }
            _ => {
                let cell = [1usize, 2, 4][rng.random_range(0..3)];
                let flip = rng.random_range(0..2);
                for r in 0..n {
                    for c in 0..n {
                        out.push(on((r / cell + c / cell + flip) % 2 == 0));
                    }
                }
            }
        }
    }
}

/// Degenerate dataset: every context maps to the same point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMass {
    pub point: Vec<f64>,
    pub contexts: usize,
}

impl Dataset for PointMass {
    fn dim(&self) -> usize {
        self.point.len()
    }

    fn contexts(&self) -> usize {
        self.contexts
    }

    fn sample_one(&self, _rng: &mut dyn RngCore, _context: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.point);
    }
}

/// Dataset selector used by experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mixture2d,
    Patterns8x8,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mixture2d => "mixture2d",
            DatasetKind::Patterns8x8 => "patterns8x8",
        }
    }

    pub fn build(self) -> Box<dyn Dataset> {
        match self {
            DatasetKind::Mixture2d => Box::new(GaussianMixture2d::default()),
            DatasetKind::Patterns8x8 => Box::new(Patterns8x8),
        }
    }
}
