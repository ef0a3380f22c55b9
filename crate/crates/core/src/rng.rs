//! Seeded random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Independent stream `index` of the generator keyed by `seed`. Work split
/// across threads draws from `(seed, item index)` streams so results do not
/// depend on scheduling.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Standard normal draws, sampled in `f64` and rounded to `S` so both
/// precisions consume identical streams.
pub fn normals<S: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}
