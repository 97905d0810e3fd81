//! Counter-based random draws and the common noise path.
//!
//! Every draw is a pure function of `(seed, stream, step)`: the generator
//! for a given particle at a given step is rebuilt from a hash of the three
//! values. Particles can therefore be updated in any order, on any number of
//! threads, and a simulation can be restarted mid-run without replaying the
//! draws that came before.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed, e.g. one per Monte Carlo replica.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ 0x5851_F42D_4C95_7F2D).wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator dedicated to `(stream, step)`.
    #[inline]
    pub fn stream(&self, stream: u64, step: u64) -> SplitMix64 {
        let k = mix64(self.seed ^ 0xD1B5_4A32_D192_ED03);
        let k = mix64(k ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let k = mix64(k ^ step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
        SplitMix64::seed_from_u64(k)
    }

    /// Standard normal draw for `(stream, step)`.
    #[inline]
    pub fn normal(&self, stream: u64, step: u64) -> f64 {
        self.stream(stream, step).sample(StandardNormal)
    }
}

/// Draws for one particle at one step: a standard normal increment and,
/// on demand, a uniform for the bridge crossing test.
pub struct ParticleDraws {
    rng: SplitMix64,
}

impl ParticleDraws {
    #[inline]
    pub fn new(source: &CounterRng, particle: u64, step: u64) -> Self {
        Self {
            rng: source.stream(particle, step),
        }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

/// Increments of the common Brownian motion `W` on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub seed: u64,
    pub dt: f64,
    /// `increments[k]` is `W(t_{k+1}) - W(t_k)`.
    pub increments: Vec<f64>,
}

impl NoisePath {
    /// Stream index reserved for the common noise within its seed.
    const STREAM: u64 = u64::MAX;

    /// Increment `k` is a function of `(seed, k)` only, so a longer path
    /// extends a shorter one with the same seed.
    pub fn generate(seed: u64, dt: f64, steps: usize) -> Self {
        let rng = CounterRng::new(seed);
        let scale = dt.sqrt();
        let increments = (0..steps as u64)
            .map(|k| scale * rng.normal(Self::STREAM, k))
            .collect();
        Self { seed, dt, increments }
    }

    /// Path with all increments zero, used when there is no transport noise.
    pub fn zero(dt: f64, steps: usize) -> Self {
        Self {
            seed: 0,
            dt,
            increments: vec![0.0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// `W(t_k)` for `k = 0..=steps`.
    pub fn values(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.increments.len() + 1);
        let mut acc = 0.0;
        w.push(acc);
        for dw in &self.increments {
            acc += dw;
            w.push(acc);
        }
        w
    }

    pub fn ensure_covers(&self, steps: usize, dt: f64) -> Result<()> {
        if self.increments.len() < steps {
            return Err(Error::NoiseMismatch(format!(
                "noise path has {} increments, {} required",
                self.increments.len(),
                steps
            )));
        }
        if (self.dt - dt).abs() > 1e-15 * dt.max(1.0) {
            return Err(Error::NoiseMismatch(format!(
                "noise path dt {} differs from grid dt {}",
                self.dt, dt
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_depend_only_on_counters() {
        let rng = CounterRng::new(42);
        let a = rng.normal(7, 11);
        let _ = rng.normal(8, 11);
        assert_eq!(a.to_bits(), rng.normal(7, 11).to_bits());
        assert_ne!(a.to_bits(), rng.normal(7, 12).to_bits());
        assert_ne!(a.to_bits(), CounterRng::new(43).normal(7, 11).to_bits());
    }

    #[test]
    fn noise_prefix_is_stable() {
        let short = NoisePath::generate(3, 0.01, 10);
        let long = NoisePath::generate(3, 0.01, 50);
        assert_eq!(short.increments[..], long.increments[..10]);
    }

    #[test]
    fn noise_increments_have_variance_dt() {
        let dt = 0.25;
        let path = NoisePath::generate(9, dt, 200_000);
        let n = path.steps() as f64;
        let mean = path.increments.iter().sum::<f64>() / n;
        let var = path.increments.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // standard error of the mean is sqrt(dt / n) ~ 1.1e-3
        assert!(mean.abs() < 5e-3, "mean {mean}");
        // relative standard error of the variance is sqrt(2 / n) ~ 3.2e-3
        assert!((var / dt - 1.0).abs() < 0.016, "var {var}");
    }

    #[test]
    fn particle_draws_are_standard_normal() {
        let rng = CounterRng::new(1);
        let n = 100_000u64;
        let draws: Vec<f64> = (0..n).map(|i| rng.normal(i, 5)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| x * x).sum::<f64>() / n as f64 - mean * mean;
        assert!(mean.abs() < 0.016);
        assert!((var - 1.0).abs() < 0.023);
    }
}
