//! Synthetic test images and noise models for the bundled experiments.
//!
//! Everything here is deterministic given a seed; data generation draws from
//! the dedicated data stream so solver seeds never perturb the instance.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::sampling::{seeded_rng, STREAM_DATA};

/// Piecewise-constant phantom on an `n x n` grid with values in [0, hi]:
/// a large disk, a denser off-center disk, and a rectangular insert.
pub fn disk_phantom(n: usize, hi: f64) -> Vec<f64> {
    let mut img = vec![0.0; n * n];
    let c = (n as f64 - 1.0) / 2.0;
    let r_outer = 0.42 * n as f64;
    let (cx2, cy2, r2) = (c - 0.18 * n as f64, c + 0.12 * n as f64, 0.14 * n as f64);
    for row in 0..n {
        for col in 0..n {
            let (dy, dx) = (row as f64 - c, col as f64 - c);
            let v = &mut img[row * n + col];
            if (dy * dy + dx * dx).sqrt() <= r_outer {
                *v = 0.4 * hi;
            }
            let (dy2, dx2) = (row as f64 - cy2, col as f64 - cx2);
            if (dy2 * dy2 + dx2 * dx2).sqrt() <= r2 {
                *v = hi;
            }
            let in_rect = row as f64 >= c + 0.05 * n as f64
                && row as f64 <= c + 0.25 * n as f64
                && col as f64 >= c + 0.02 * n as f64
                && col as f64 <= c + 0.30 * n as f64;
            if in_rect {
                *v = 0.7 * hi;
            }
        }
    }
    img
}

/// Adds i.i.d. Gaussian noise with the given standard deviation.
pub fn add_gaussian_noise(clean: &[f64], sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, STREAM_DATA);
    let normal = rand_distr::Normal::new(0.0, sigma).expect("sigma is finite and positive");
    clean.iter().map(|&v| v + normal.sample(&mut rng)).collect()
}

/// Draws one Poisson count per entry of `mean`. Means must be nonnegative;
/// zero mean yields a zero count.
pub fn poisson_counts(mean: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = seeded_rng(seed, STREAM_DATA);
    mean.iter()
        .map(|&m| {
            if m < 0.0 || !m.is_finite() {
                return Err(Error::invalid(format!("Poisson mean must be finite and >= 0, got {m}")));
            }
            if m == 0.0 {
                return Ok(0.0);
            }
            let p = Poisson::new(m)
                .map_err(|e| Error::invalid(format!("Poisson({m}): {e}")))?;
            Ok(p.sample(&mut rng))
        })
        .collect()
}

/// Normalized Gaussian kernel, `k x k`, row-major. Used as a stand-in blur
/// at desk scale where a long motion streak would dominate a small image.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (row, col) = (idx / k, idx % k);
            let (dy, dx) = (row as f64 - c, col as f64 - c);
            (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Diagonal motion-blur kernel: `k` unit taps along the main diagonal of a
/// `k x k` stencil. Taps are unit weights, not averaged, so blurred
/// intensities sit well above the pointwise image range.
pub fn motion_kernel(k: usize) -> Vec<f64> {
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        w[i * k + i] = 1.0;
    }
    w
}

/// Uniformly random values in [lo, hi], from the data stream.
pub fn uniform_field(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, STREAM_DATA);
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}
