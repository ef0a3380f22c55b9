use std::collections::VecDeque;

use crate::error::{contract, Result};

/// Rolling per-context reward buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextStats {
    buffers: Vec<VecDeque<f64>>,
    capacity: usize,
    min_count: usize,
}

/// Floor on the buffer std used as a divisor.
pub const STD_FLOOR: f64 = 1e-6;

impl ContextStats {
    pub fn new(contexts: usize, capacity: usize, min_count: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(contract("buffer capacity must be positive"));
        }
        Ok(Self {
            buffers: vec![VecDeque::with_capacity(capacity); contexts],
            capacity,
            min_count,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn buffer(&self, c: usize) -> &VecDeque<f64> {
        &self.buffers[c]
    }

    fn slot(&mut self, c: usize) -> &mut VecDeque<f64> {
        if c >= self.buffers.len() {
            self.buffers.resize(c + 1, VecDeque::with_capacity(self.capacity));
        }
        &mut self.buffers[c]
    }

    pub fn push(&mut self, c: usize, r: f64) {
        let cap = self.capacity;
        let buf = self.slot(c);
        if buf.len() == cap {
            buf.pop_front();
        }
        buf.push_back(r);
    }

    /// `(mean, population std)` of context `c`'s buffer, `None` when empty.
    /// The mean is accumulated relative to the first entry so a buffer of
    /// equal values has that value as its exact mean.
    pub fn moments(&self, c: usize) -> Option<(f64, f64)> {
        let buf = self.buffers.get(c)?;
        let first = *buf.front()?;
        let n = buf.len() as f64;
        let mean = first + buf.iter().map(|&x| x - first).sum::<f64>() / n;
        let var = buf.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }
}

/// Advantage of reward `r` for context `c` against the buffer as it stood
/// before `r`, which is then pushed. Below `min_count` entries only the
/// mean is removed. The result is clipped to `[-a_max, a_max]`; an empty
/// buffer gives 0.
pub fn normalize_reward(stats: &mut ContextStats, c: usize, r: f64, a_max: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(contract(format!("reward {r} for context {c} is not finite")));
    }
    let adv = match stats.moments(c) {
        None => 0.0,
        Some((mean, std)) => {
            if stats.buffers[c].len() < stats.min_count {
                r - mean
            } else {
                (r - mean) / std.max(STD_FLOOR)
            }
        }
    };
    stats.push(c, r);
    Ok(adv.clamp(-a_max, a_max))
}
