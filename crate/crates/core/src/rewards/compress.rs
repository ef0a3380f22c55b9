//! Transform-coding size proxy: 8-bit quantization, blockwise orthonormal
//! DCT-II, uniform coefficient quantization, then an entropy-coded size.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{contract, Error, Result};

const B: usize = 8;
/// Fixed container overhead in bytes.
pub const HEADER_BYTES: f64 = 8.0;
pub const DEFAULT_STEP: f64 = 16.0;

fn basis() -> &'static [[f64; B]; B] {
    static TABLE: OnceLock<[[f64; B]; B]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; B]; B];
        for (u, row) in t.iter_mut().enumerate() {
            let a = if u == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * PI / (2 * B) as f64).cos();
            }
        }
        t
    })
}

/// Orthonormal 2-D DCT-II of one 8×8 block (row-major in and out).
pub fn dct8x8(block: &[f64; B * B]) -> [f64; B * B] {
    let c = basis();
    // rows first, then columns
    let mut tmp = [0.0; B * B];
    for r in 0..B {
        for u in 0..B {
            let mut s = 0.0;
            for x in 0..B {
                s += c[u][x] * block[r * B + x];
            }
            tmp[r * B + u] = s;
        }
    }
    let mut out = [0.0; B * B];
    for v in 0..B {
        for u in 0..B {
            let mut s = 0.0;
            for y in 0..B {
                s += c[v][y] * tmp[y * B + u];
            }
            out[v * B + u] = s;
        }
    }
    out
}

/// Plug-in Shannon entropy in bits per symbol.
pub fn empirical_entropy(symbols: &[i64]) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for &s in symbols {
        *counts.entry(s).or_default() += 1;
    }
    let n = symbols.len() as f64;
    let h: f64 = counts
        .values()
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Quantized coefficient stream of a `[0, 1]` image, padded to whole blocks
/// by edge replication.
pub fn quantized_coefficients(image: &[f64], h: usize, w: usize, step: f64) -> Result<Vec<i64>> {
    if h == 0 || w == 0 || image.len() != h * w {
        return Err(Error::Shape(format!("{} pixels for a {h}x{w} image", image.len())));
    }
    if !(step > 0.0) {
        return Err(contract("quantization step must be positive"));
    }
    if let Some((i, v)) = image.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(contract(format!("pixel {i} = {v} outside [0, 1]")));
    }
    let (ph, pw) = (h.div_ceil(B) * B, w.div_ceil(B) * B);
    let level = |r: usize, c: usize| (image[r.min(h - 1) * w + c.min(w - 1)] * 255.0).round() - 128.0;
    let mut out = Vec::with_capacity(ph * pw);
    let mut block = [0.0; B * B];
    for br in (0..ph).step_by(B) {
        for bc in (0..pw).step_by(B) {
            for y in 0..B {
                for x in 0..B {
                    block[y * B + x] = level(br + y, bc + x);
                }
            }
            out.extend(dct8x8(&block).iter().map(|&c| (c / step).round() as i64));
        }
    }
    Ok(out)
}

/// `8 + ceil(n·Ĥ/8)` bytes, `n` the number of coefficients and `Ĥ` their
/// empirical entropy.
pub fn compress_proxy_size_with_step(image: &[f64], h: usize, w: usize, step: f64) -> Result<f64> {
    let q = quantized_coefficients(image, h, w, step)?;
    let bits = q.len() as f64 * empirical_entropy(&q);
    Ok(HEADER_BYTES + (bits / 8.0).ceil())
}

pub fn compress_proxy_size(image: &[f64], h: usize, w: usize) -> Result<f64> {
    compress_proxy_size_with_step(image, h, w, DEFAULT_STEP)
}

/// Maps model output in roughly `[-1, 1]` to pixel intensities.
pub fn to_unit_interval(sample: &[f64]) -> Vec<f64> {
    sample.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_of_constant_block_is_dc_only() {
        let c = dct8x8(&[3.0; 64]);
        assert!((c[0] - 24.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(empirical_entropy(&[4; 10]), 0.0);
        assert!((empirical_entropy(&[0, 1, 2, 3]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_sizes() {
        assert_eq!(compress_proxy_size(&[0.5; 64], 8, 8).unwrap(), 8.0);
        assert_eq!(compress_proxy_size(&[0.9; 64], 8, 8).unwrap(), 9.0);
        let ramp: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        assert_eq!(compress_proxy_size(&ramp, 8, 8).unwrap(), 12.0);
        let checker: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect();
        assert_eq!(compress_proxy_size(&checker, 8, 8).unwrap(), 21.0);
        let padded: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        assert_eq!(compress_proxy_size(&padded, 10, 10).unwrap(), 30.0);
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let mut img = vec![0.5; 64];
        img[7] = 1.5;
        assert!(matches!(compress_proxy_size(&img, 8, 8), Err(Error::Contract(_))));
        img[7] = f64::NAN;
        assert!(compress_proxy_size(&img, 8, 8).is_err());
        assert!(compress_proxy_size(&[0.5; 10], 8, 8).is_err());
    }
}
