//! Checks of the constraints a solution must satisfy, evaluated on a
//! recorded [`Trajectory`].

use serde::{Deserialize, Serialize};

use crate::cascade::scan_uniform;
use crate::error::{invalid, Error, Result};
use crate::params::PhysicalParams;
use crate::particle::{BlowupEstimate, Trajectory};
use crate::profile::{Stability, SupercoolingProfile};
use crate::testfn::TestFunction;

/// Relative tolerance of the energy balance, in units of the total mass.
pub const ENERGY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Hard checks fail a report; soft ones are informative.
    pub hard: bool,
    pub value: f64,
    pub tolerance: f64,
    pub worst_time: Option<f64>,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, pass: bool, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            pass,
            hard: true,
            value,
            tolerance,
            worst_time: None,
            detail: String::new(),
        }
    }

    fn at(mut self, t: Option<f64>) -> Self {
        self.worst_time = t;
        self
    }

    fn soft(mut self) -> Self {
        self.hard = false;
        self
    }

    fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub checks: Vec<CheckResult>,
}

impl DiagnosticsReport {
    /// Every check that applies to `traj`: energy balance, jump minimality,
    /// late jumps, the density bound at every snapshot with `t > 0`, and the
    /// weak-form residuals when moments were recorded.
    pub fn evaluate(traj: &Trajectory) -> Self {
        let mut checks = vec![energy_balance_residual(traj)];
        checks.push(jump_minimality_check(traj).unwrap_or_else(|e| {
            CheckResult::new("jump_minimality", false, f64::NAN, 0.0).detail(e.to_string())
        }));
        checks.push(no_late_jump_check(traj));
        for snap in traj.snapshots.iter().filter(|s| s.time > 0.0) {
            if let Ok(d) = density_bound_check(traj, snap.time) {
                checks.push(
                    CheckResult::new(
                        format!("density_bound_t={}", snap.time),
                        d.pass,
                        d.max_density,
                        d.bound + d.allowance,
                    )
                    .at(Some(snap.time))
                    .detail(format!("tighter bound {:.6}", d.tighter_bound)),
                );
            }
        }
        if traj.weak.is_some() {
            let tol = ENERGY_TOL * traj.total_mass;
            for f in TestFunction::ALL {
                if let Ok(r) = weak_form_residual(traj, f) {
                    let check = CheckResult::new(format!("weak_form_{}", f.name()), true, r.max, tol)
                        .at(Some(r.worst_time));
                    checks.push(if f == TestFunction::One {
                        CheckResult { pass: r.max <= tol, ..check }
                    } else {
                        check.soft()
                    });
                }
            }
        }
        Self { checks }
    }

    /// `false` if any hard check failed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass || !c.hard)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// `max_k |lambda_kappa (s(t_k) - s0) - absorbed mass(t_k)|`; passes at
/// `1e-10 A`.
pub fn energy_balance_residual(traj: &Trajectory) -> CheckResult {
    let lk = traj.params.lambda_kappa();
    let s0 = traj.params.s0;
    let mut worst = 0.0;
    let mut worst_k = 0;
    for k in 0..traj.len() {
        let r = (lk * (traj.fronts[k] - s0) - traj.absorbed_mass(k)).abs();
        if r > worst || r.is_nan() {
            worst = r;
            worst_k = k;
        }
    }
    let tol = ENERGY_TOL * traj.total_mass;
    CheckResult::new("energy_balance", worst <= tol, worst, tol).at(traj.times.get(worst_k).copied())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    /// Largest residual over the grid.
    pub max: f64,
    pub worst_time: f64,
    /// Residual at the last grid point.
    pub last: f64,
    /// Jump-correction sum up to the last grid point.
    pub jump_correction: f64,
}

/// Residual of the weak formulation with jumps for test function `f`,
/// evaluated at every grid time `t_n`:
///
/// `<nu_n, phi_n> - <nu_0-, phi_0>` against the sum of the generator term,
/// the transport-noise Itô term (left-point sums against `dW`), the front
/// term `-lambda_kappa sum phi(t_k, s_{k-1}) (s_k - s_{k-1})`, and the jump
/// correction `sum_k [phi(t_k, s_{k-1}) m_k - sum_{absorbed} (A/N) phi(t_k, x)]`,
/// where `m_k` is the mass absorbed at `t_k`. On the grid every front
/// increment is a jump of the discrete path.
pub fn weak_form_residual(traj: &Trajectory, f: TestFunction) -> Result<WeakResidual> {
    let w = traj
        .weak
        .as_ref()
        .ok_or_else(|| Error::MissingData("trajectory has no weak-form moments".into()))?;
    let j = TestFunction::ALL.iter().position(|&g| g == f).expect("battery member");
    let n = traj.len();
    if w.m.len() != n {
        return Err(Error::MissingData("weak-form moments do not cover the grid".into()));
    }
    let lk = traj.params.lambda_kappa();
    let theta = traj.params.theta;
    let dt = traj.dt;
    let mut prev_front = traj.fronts[0] - traj.increments[0];
    let mut prev_absorbed = if traj.start_step == 0 { 0 } else { traj.absorbed[0] };
    let mut integral = Neumaier::default();
    let mut front_term = Neumaier::default();
    let mut correction = Neumaier::default();
    let mut max = 0.0;
    let mut worst_time = traj.times[0];
    let mut last = 0.0;
    for k in 0..n {
        if k > 0 {
            let dw = traj.noise.increments[traj.start_step + k - 1];
            integral.add(dt * w.d[k - 1][j]);
            integral.add(theta * w.g[k - 1][j] * dw);
        }
        let t = traj.times[k];
        let phi_front = f.value(t, prev_front);
        let absorbed_mass = traj.mass_per_particle * (traj.absorbed[k] - prev_absorbed) as f64;
        front_term.add(phi_front * traj.increments[k]);
        correction.add(phi_front * absorbed_mass);
        correction.add(-w.absorbed_phi[k][j]);
        prev_front = traj.fronts[k];
        prev_absorbed = traj.absorbed[k];
        let lhs = w.m[k][j] - w.initial[j];
        let rhs = integral.sum() - lk * front_term.sum() + correction.sum();
        let r = (lhs - rhs).abs();
        if r > max {
            max = r;
            worst_time = t;
        }
        last = r;
    }
    Ok(WeakResidual {
        max,
        worst_time,
        last,
        jump_correction: correction.sum(),
    })
}

/// Compensated summation, so that long residual sums stay within a few
/// ulps of the exact value.
#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityCheck {
    pub time: f64,
    /// Largest histogram density divided by the total mass.
    pub max_density: f64,
    /// `1 / (sigma sqrt(2 pi (1 - |rho|) t))`.
    pub bound: f64,
    /// `1 / (sigma sqrt(2 pi (1 - rho^2) t))`, reported only.
    pub tighter_bound: f64,
    /// Three standard deviations of a histogram bin at the bound.
    pub allowance: f64,
    pub pass: bool,
}

/// Compares the normalized density snapshot at time `t` with the L-infinity
/// bound of the killed process.
pub fn density_bound_check(traj: &Trajectory, t: f64) -> Result<DensityCheck> {
    if !(t > 0.0) {
        return Err(invalid("t", "the density bound is vacuous at t = 0"));
    }
    let snap = traj
        .snapshots
        .iter()
        .find(|s| (s.time - t).abs() <= 0.5 * traj.dt)
        .ok_or_else(|| Error::MissingData(format!("no density snapshot at t = {t}")))?;
    let r = traj.reduced;
    let time = snap.time;
    let bound = 1.0 / (r.sigma * (2.0 * std::f64::consts::PI * (1.0 - r.rho.abs()) * time).sqrt());
    let tighter = 1.0 / (r.sigma * (2.0 * std::f64::consts::PI * (1.0 - r.rho * r.rho) * time).sqrt());
    let h = snap.bin_edges[1] - snap.bin_edges[0];
    let max_density = if snap.total_mass > 0.0 {
        snap.density.iter().copied().fold(0.0, f64::max) / snap.total_mass
    } else {
        0.0
    };
    let allowance = 3.0 * (bound / (snap.n_particles.max(1) as f64 * h)).sqrt();
    Ok(DensityCheck {
        time,
        max_density,
        bound,
        tighter_bound: tighter,
        allowance,
        pass: max_density <= bound + allowance,
    })
}

/// Fails if a macroscopic front increment occurs after
/// `alpha^2 / (2 pi sigma^2 (1 - |rho|))`.
pub fn no_late_jump_check(traj: &Trajectory) -> CheckResult {
    let horizon = traj.reduced.no_jump_horizon();
    let late = (0..traj.len()).find(|&k| traj.is_macroscopic(k) && traj.times[k] > horizon);
    let value = late.map_or(0.0, |k| traj.increments[k]);
    CheckResult::new("no_late_jump", late.is_none(), value, traj.jump_threshold)
        .at(late.map(|k| traj.times[k]))
        .detail(format!("horizon {horizon}"))
}

/// Recomputes the physical-jump scan on every retained pre-jump measure and
/// requires bitwise equality with the recorded jump.
///
/// The initial jump is resolved against the continuous profile and is not
/// part of the check. Errors if a macroscopic step has no pre-jump record.
pub fn jump_minimality_check(traj: &Trajectory) -> Result<CheckResult> {
    for k in 1..traj.len() {
        let step = traj.start_step + k;
        if traj.is_macroscopic(k) && !traj.jumps.iter().any(|r| r.step == step && !r.initial) {
            return Err(Error::MissingData(format!("no pre-jump record for the jump at step {step}")));
        }
    }
    let mut worst = 0.0f64;
    let mut worst_time = None;
    let mut failures = Vec::new();
    let mut checked = 0;
    for r in traj.jumps.iter().filter(|r| !r.initial) {
        checked += 1;
        let a = r.feedback;
        let len = r.offsets.len();
        let k = scan_uniform(&r.offsets, a);
        if !(k < len || r.window >= a * len as f64 || r.n_beyond == 0) {
            failures.push(format!("step {}: window {} too small", r.step, r.window));
            continue;
        }
        let expected = a * k as f64;
        let excess = r.size - expected;
        let front_gap = (r.front_after - r.front_before - r.size).abs();
        let ok = k == r.count
            && expected.to_bits() == r.size.to_bits()
            && front_gap <= 1e-12 * (1.0 + r.front_after.abs());
        if excess.abs() > worst.abs() || (!ok && worst == 0.0) {
            worst = excess;
            worst_time = Some(r.time);
        }
        if !ok {
            failures.push(format!(
                "step {}: recorded {} ({} particles), scan {} ({} particles)",
                r.step, r.size, r.count, expected, k
            ));
        }
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("{checked} jumps checked")
    } else {
        failures.join("; ")
    };
    Ok(CheckResult::new("jump_minimality", pass, worst, 0.0).at(worst_time).detail(detail))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Density everywhere below `lambda_kappa`: the front stays continuous.
    Subcritical,
    /// Density above `lambda_kappa` somewhere: blow-up has positive probability.
    Supercritical,
    /// Neither (the density touches `lambda_kappa` but never exceeds it).
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub stable_start: bool,
    pub checks: Vec<CheckResult>,
}

impl RegimeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass || !c.hard)
    }
}

/// Sign checks on a Monte Carlo ensemble over independent `W`:
/// no macroscopic jump in any replica when `||u0|| < lambda_kappa`, at least
/// one when the density exceeds `lambda_kappa` somewhere, and for a stable
/// start no jump within the first grid step plus a positive jump-free
/// fraction.
pub fn threshold_regime_check(
    profile: &SupercoolingProfile,
    params: &PhysicalParams,
    ensemble: &BlowupEstimate,
) -> RegimeReport {
    let lk = params.lambda_kappa();
    let regime = if profile.sup_norm() < lk {
        Regime::Subcritical
    } else if profile.values().iter().any(|&v| v > lk) {
        Regime::Supercritical
    } else {
        Regime::Critical
    };
    let stable = profile.stability_check(lk) == Stability::Stable;
    let jumped = ensemble.proportion.successes;
    let mut checks = Vec::new();
    match regime {
        Regime::Subcritical => checks.push(
            CheckResult::new("no_jumps", jumped == 0, jumped as f64, 0.0)
                .detail(format!("{jumped} of {} replicas jumped", ensemble.proportion.trials)),
        ),
        Regime::Supercritical => checks.push(
            CheckResult::new("some_jump", ensemble.proportion.lower > 0.0, ensemble.proportion.lower, 0.0)
                .detail(format!(
                    "{jumped} of {} replicas jumped, 95% interval [{:.4}, {:.4}]",
                    ensemble.proportion.trials, ensemble.proportion.lower, ensemble.proportion.upper
                )),
        ),
        Regime::Critical => {}
    }
    if stable {
        let early = ensemble
            .replicas
            .iter()
            .filter(|r| r.first_jump_time.is_some_and(|t| t <= ensemble.dt * (1.0 + 1e-9)))
            .count();
        checks.push(
            CheckResult::new("positive_blowup_time", early == 0, early as f64, 0.0)
                .detail(format!("{early} replicas jumped within the first step")),
        );
        let free = ensemble.jump_free_fraction();
        checks.push(CheckResult::new("jump_free_fraction", free > 0.0, free, 0.0).soft());
    }
    RegimeReport {
        regime,
        stable_start: stable,
        checks,
    }
}
