//! Physical constants of the Stefan problem and their reduced form.
//!
//! The freezing temperature is fixed at zero. All quantities are
//! nondimensional.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Physical constants: thermal diffusivity `kappa`, latent-heat ratio
/// `lambda`, transport-noise strength `theta` and the initial front `s0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub kappa: f64,
    pub lambda: f64,
    pub theta: f64,
    pub s0: f64,
}

impl PhysicalParams {
    /// Equilibrium freezing temperature.
    pub const FREEZING_TEMPERATURE: f64 = 0.0;

    pub fn new(kappa: f64, lambda: f64, theta: f64, s0: f64) -> Result<Self> {
        let p = Self {
            kappa,
            lambda,
            theta,
            s0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks the invariants in a fixed order and reports the first one that fails.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("lambda", self.lambda),
            ("theta", self.theta),
            ("s0", self.s0),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, format!("must be finite, got {v}")));
            }
        }
        if self.kappa <= 0.0 {
            return Err(invalid("kappa", format!("must be > 0, got {}", self.kappa)));
        }
        if self.lambda <= 0.0 {
            return Err(invalid("lambda", format!("must be > 0, got {}", self.lambda)));
        }
        if self.s0 < 0.0 {
            return Err(invalid("s0", format!("must be >= 0, got {}", self.s0)));
        }
        let bound = self.noise_bound();
        if self.theta.abs() >= bound {
            return Err(invalid(
                "theta",
                format!(
                    "parabolicity requires |theta| < sqrt(2*kappa) = {bound}, got {}",
                    self.theta
                ),
            ));
        }
        Ok(())
    }

    /// `sqrt(2*kappa)`, the strict upper bound on `|theta|`.
    pub fn noise_bound(&self) -> f64 {
        (2.0 * self.kappa).sqrt()
    }

    pub fn lambda_kappa(&self) -> f64 {
        self.lambda * self.kappa
    }

    /// Reduced parameters for a profile carrying `total_mass` of supercooling.
    pub fn reduce(&self, total_mass: f64) -> ReducedParams {
        debug_assert!(total_mass >= 0.0);
        let sigma = self.noise_bound();
        ReducedParams {
            rho: self.theta / sigma,
            sigma,
            alpha: total_mass / (self.lambda * self.kappa),
        }
    }
}

/// Noise correlation `rho`, volatility `sigma` and feedback strength `alpha`.
///
/// `alpha` is the total front advance available if every unit of mass is
/// absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedParams {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl ReducedParams {
    pub fn kappa(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    pub fn theta(&self) -> f64 {
        self.rho * self.sigma
    }

    /// Volatility carried by the idiosyncratic Brownian motion.
    pub fn idiosyncratic_vol(&self) -> f64 {
        self.sigma * (1.0 - self.rho * self.rho).sqrt()
    }

    /// Volatility carried by the common Brownian motion.
    pub fn common_vol(&self) -> f64 {
        self.sigma * self.rho
    }

    /// Time after which the front cannot jump: `alpha^2 / (2 pi sigma^2 (1 - |rho|))`.
    pub fn no_jump_horizon(&self) -> f64 {
        self.alpha * self.alpha
            / (2.0 * std::f64::consts::PI * self.sigma * self.sigma * (1.0 - self.rho.abs()))
    }
}
