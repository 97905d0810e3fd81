//! Test functions for weak-form checks.
//!
//! Each function is smooth and bounded with bounded derivatives on
//! `[0, T] x R`, which is all the weak formulation asks for.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestFunction {
    /// `phi = 1`.
    One,
    /// `phi = exp(-x)`. Bounded on the region the particles occupy (x >= 0).
    ExpDecay,
    /// `phi = cos(x) exp(-x^2 / 8)`.
    CosBump,
    /// `phi = exp(-t) exp(-x)`.
    ExpDecayTime,
}

impl TestFunction {
    pub const ALL: [TestFunction; 4] = [
        TestFunction::One,
        TestFunction::ExpDecay,
        TestFunction::CosBump,
        TestFunction::ExpDecayTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::One => "one",
            TestFunction::ExpDecay => "exp_decay",
            TestFunction::CosBump => "cos_bump",
            TestFunction::ExpDecayTime => "exp_decay_time",
        }
    }

    pub fn value(self, t: f64, x: f64) -> f64 {
        match self {
            TestFunction::One => 1.0,
            TestFunction::ExpDecay => (-x).exp(),
            TestFunction::CosBump => x.cos() * (-x * x / 8.0).exp(),
            TestFunction::ExpDecayTime => (-t - x).exp(),
        }
    }

    pub fn dt(self, t: f64, x: f64) -> f64 {
        match self {
            TestFunction::ExpDecayTime => -(-t - x).exp(),
            _ => 0.0,
        }
    }

    pub fn dx(self, t: f64, x: f64) -> f64 {
        match self {
            TestFunction::One => 0.0,
            TestFunction::ExpDecay => -(-x).exp(),
            TestFunction::CosBump => {
                let g = (-x * x / 8.0).exp();
                -g * (x.sin() + 0.25 * x * x.cos())
            }
            TestFunction::ExpDecayTime => -(-t - x).exp(),
        }
    }

    pub fn dxx(self, t: f64, x: f64) -> f64 {
        match self {
            TestFunction::One => 0.0,
            TestFunction::ExpDecay => (-x).exp(),
            TestFunction::CosBump => {
                let g = (-x * x / 8.0).exp();
                g * ((x * x / 16.0 - 1.25) * x.cos() + 0.5 * x * x.sin())
            }
            TestFunction::ExpDecayTime => (-t - x).exp(),
        }
    }

    /// `d_t phi + kappa d_xx phi`.
    pub fn generator(self, kappa: f64, t: f64, x: f64) -> f64 {
        self.dt(t, x) + kappa * self.dxx(t, x)
    }
}
