//! Piecewise-constant initial supercooling densities `u0 = -v0 >= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant density on `[origin, last breakpoint)`.
///
/// Piece `i` covers `[edges[i], edges[i + 1])` with density `values[i]`;
/// `edges[0]` is the initial front `s0`. Outside the pieces the density is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileSpec", into = "ProfileSpec")]
pub struct SupercoolingProfile {
    edges: Vec<f64>,
    values: Vec<f64>,
    /// `cumulative[i]` is the mass on `[edges[0], edges[i]]`.
    cumulative: Vec<f64>,
}

/// Serialized form: the origin and a list of `(right breakpoint, value)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub origin: f64,
    pub pieces: Vec<(f64, f64)>,
}

impl TryFrom<ProfileSpec> for SupercoolingProfile {
    type Error = Error;

    fn try_from(spec: ProfileSpec) -> Result<Self> {
        Self::new(spec.origin, &spec.pieces)
    }
}

impl From<SupercoolingProfile> for ProfileSpec {
    fn from(p: SupercoolingProfile) -> Self {
        ProfileSpec {
            origin: p.origin(),
            pieces: p.pieces().collect(),
        }
    }
}

/// Outcome of [`SupercoolingProfile::stability_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
}

impl SupercoolingProfile {
    /// Builds a profile from `origin` and `(right breakpoint, value)` pairs.
    pub fn new(origin: f64, pieces: &[(f64, f64)]) -> Result<Self> {
        if !origin.is_finite() {
            return Err(Error::InvalidProfile(format!("origin must be finite, got {origin}")));
        }
        let mut edges = Vec::with_capacity(pieces.len() + 1);
        let mut values = Vec::with_capacity(pieces.len());
        edges.push(origin);
        for (i, &(right, value)) in pieces.iter().enumerate() {
            let left = edges[i];
            if !right.is_finite() || right <= left {
                return Err(Error::InvalidProfile(format!(
                    "breakpoint {i} = {right} must be finite and exceed {left}"
                )));
            }
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidProfile(format!(
                    "value {i} = {value} must be finite and non-negative"
                )));
            }
            edges.push(right);
            values.push(value);
        }
        let mut cumulative = Vec::with_capacity(edges.len());
        cumulative.push(0.0);
        for i in 0..values.len() {
            let next = cumulative[i] + values[i] * (edges[i + 1] - edges[i]);
            cumulative.push(next);
        }
        Ok(Self {
            edges,
            values,
            cumulative,
        })
    }

    /// Constant density `value` on `(origin + a, origin + b)`, zero elsewhere.
    pub fn indicator(origin: f64, a: f64, b: f64, value: f64) -> Result<Self> {
        if a == 0.0 {
            Self::new(origin, &[(origin + b, value)])
        } else {
            Self::new(origin, &[(origin + a, 0.0), (origin + b, value)])
        }
    }

    /// Profile with no supercooling at all.
    pub fn empty(origin: f64) -> Self {
        Self {
            edges: vec![origin],
            values: Vec::new(),
            cumulative: vec![0.0],
        }
    }

    pub fn origin(&self) -> f64 {
        self.edges[0]
    }

    /// Right end of the support.
    pub fn support_end(&self) -> f64 {
        *self.edges.last().expect("edges always holds the origin")
    }

    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.edges[1..].iter().copied().zip(self.values.iter().copied())
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total_mass(&self) -> f64 {
        *self.cumulative.last().expect("cumulative is never empty")
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Density at `x`, right-continuous.
    pub fn density(&self, x: f64) -> f64 {
        match self.piece_containing(x) {
            Some(i) => self.values[i],
            None => 0.0,
        }
    }

    fn piece_containing(&self, x: f64) -> Option<usize> {
        if x < self.edges[0] || x >= self.support_end() {
            return None;
        }
        // last edge <= x
        let idx = self.edges.partition_point(|&e| e <= x);
        Some(idx - 1)
    }

    /// Mass on `[origin, x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.edges[0] {
            return 0.0;
        }
        if x >= self.support_end() {
            return self.total_mass();
        }
        let i = self.edges.partition_point(|&e| e <= x) - 1;
        self.cumulative[i] + self.values[i] * (x - self.edges[i])
    }

    /// Exact integral of the density over `[a, b]`.
    pub fn mass(&self, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return Err(Error::ReversedInterval { a, b });
        }
        Ok((self.cdf(b) - self.cdf(a)).max(0.0))
    }

    /// Smallest `x` with `mass(origin, x) >= q * total_mass`.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        let total = self.total_mass();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidProfile(format!("quantile level {q} outside [0, 1]")));
        }
        let target = q * total;
        if target <= 0.0 {
            return Ok(self.edges[0]);
        }
        for i in 0..self.values.len() {
            if self.values[i] > 0.0 && self.cumulative[i + 1] >= target {
                let x = self.edges[i] + (target - self.cumulative[i]) / self.values[i];
                return Ok(x.min(self.edges[i + 1]));
            }
        }
        // rounding in the cumulative sums: fall back to the end of the last charged piece
        let last = self.values.iter().rposition(|&v| v > 0.0).expect("total mass is positive");
        Ok(self.edges[last + 1])
    }

    /// Whether the initial profile survives an infinitesimal external heat input.
    ///
    /// For piecewise-constant densities this only depends on the piece
    /// adjacent to the origin.
    pub fn stability_check(&self, lambda_kappa: f64) -> Stability {
        match self.values.first() {
            Some(&v) if v >= lambda_kappa => Stability::Unstable,
            _ => Stability::Stable,
        }
    }

    /// `inf { y > 0 : mass(origin, origin + y) / lambda_kappa < y }`.
    pub fn initial_physical_jump(&self, lambda_kappa: f64) -> f64 {
        self.physical_jump_from(self.edges[0], lambda_kappa)
    }

    /// Physical jump for the mass measure restricted to `[base, inf)`, `base >= origin`.
    ///
    /// Scans the pieces, tracking `g(y) = mass([base, base + y]) / lk - y`,
    /// which is linear on each piece.
    pub fn physical_jump_from(&self, base: f64, lambda_kappa: f64) -> f64 {
        let start = if base <= self.edges[0] {
            0
        } else {
            self.edges.partition_point(|&e| e <= base).saturating_sub(1)
        };
        let mut y = 0.0;
        let mut g = 0.0;
        for i in start..self.values.len() {
            let left = self.edges[i].max(base);
            let right = self.edges[i + 1];
            if right <= left {
                continue;
            }
            let width = right - left;
            let slope = self.values[i] / lambda_kappa - 1.0;
            if slope < 0.0 {
                let crossing = g / -slope;
                if crossing < width {
                    return y + crossing;
                }
            }
            let absorbed = self.values[i] * width / lambda_kappa;
            // no crossing inside the piece means g >= 0 at its right end
            g = (g + absorbed - width).max(0.0);
            y += width;
        }
        // beyond the support the density is 0 and g decreases with slope -1
        y + g
    }
}
