//! Small statistical helpers.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Binomial proportion with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: usize,
    pub trials: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Proportion {
    pub fn wilson(successes: usize, trials: usize, z: f64) -> Self {
        assert!(successes <= trials, "more successes than trials");
        if trials == 0 {
            return Self {
                successes,
                trials,
                estimate: f64::NAN,
                lower: 0.0,
                upper: 1.0,
            };
        }
        let n = trials as f64;
        let p = successes as f64 / n;
        let z2 = z * z;
        let denom = 1.0 + z2 / n;
        let centre = (p + z2 / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
        Self {
            successes,
            trials,
            estimate: p,
            lower: (centre - half).max(0.0),
            upper: (centre + half).min(1.0),
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_values() {
        // closed form for p = 1/2, n = 100: centre 0.5, half = z*sqrt(0.25/100 + z^2/40000)/(1+z^2/100)
        let w = Proportion::wilson(50, 100, Z95);
        let z2 = Z95 * Z95;
        let half = Z95 * (0.0025 + z2 / 40000.0).sqrt() / (1.0 + z2 / 100.0);
        assert!((w.lower - (0.5 - half)).abs() < 1e-15);
        assert!((w.upper - (0.5 + half)).abs() < 1e-15);
        assert!((w.lower - 0.4038).abs() < 1e-4);

        let w = Proportion::wilson(0, 20, Z95);
        assert_eq!(w.lower, 0.0);
        assert!((w.upper - 0.1611).abs() < 1e-4);
        assert!(w.contains(0.1) && !w.contains(0.2));
    }

    #[test]
    fn z95_is_the_normal_quantile() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        let err = (n.cdf(Z95) - 0.975).abs();
        // limited by the accuracy of the library's erfc
        assert!(err < 1e-11, "{err:e}");
    }

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!((rms(&[3.0, 4.0]) - (12.5f64).sqrt()).abs() < 1e-15);
    }
}
