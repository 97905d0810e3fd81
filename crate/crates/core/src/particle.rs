//! Interacting particle approximation of the conditional McKean–Vlasov problem.
//!
//! Each particle carries `A / N` of the initial supercooling mass. Particles
//! keep absolute coordinates and diffuse with volatility `sigma`, a fraction
//! `rho` of which is driven by the common Brownian motion `W`. The freezing
//! front advances by `a = (A / N) / lambda_kappa` for every absorbed particle,
//! so `lambda_kappa * (front - s0)` equals the absorbed mass at all times.
//!
//! Within a step particles diffuse first; absorption is then resolved by the
//! exact physical-jump scan on the empirical measure ahead of the front.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{PhysicalParams, ReducedParams};
use crate::profile::SupercoolingProfile;
use crate::rng::{derive_seed, CounterRng, NoisePath, ParticleDraws};
use crate::stats::{Proportion, Z95};
use crate::testfn::TestFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed_common: u64,
    pub seed_idio: u64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Step increments above this count as macroscopic jumps.
    /// `None` means `max(0.05 alpha, 20 a)`.
    #[serde(default)]
    pub blowup_threshold: Option<f64>,
    pub density_bins: usize,
    /// Brownian-bridge crossing test between grid points.
    pub bridge: bool,
    /// Record the moments needed for weak-form residuals.
    #[serde(default)]
    pub weak_moments: bool,
    /// Keep a pre-jump record for every step with absorption, not only
    /// macroscopic ones.
    #[serde(default)]
    pub retain_all_jumps: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            dt: 1e-3,
            t_end: 1.0,
            seed_common: 1,
            seed_idio: 2,
            snapshot_times: Vec::new(),
            blowup_threshold: None,
            density_bins: 50,
            bridge: true,
            weak_moments: false,
            retain_all_jumps: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(invalid("n_particles", "must be >= 1"));
        }
        if self.n_particles > u32::MAX as usize {
            return Err(invalid("n_particles", "too many particles"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_end.is_finite() && self.dt < self.t_end) {
            return Err(invalid("t_end", format!("must exceed dt = {}, got {}", self.dt, self.t_end)));
        }
        if self.density_bins == 0 {
            return Err(invalid("density_bins", "must be >= 1"));
        }
        if let Some(th) = self.blowup_threshold {
            if !(th > 0.0 && th.is_finite()) {
                return Err(invalid("blowup_threshold", format!("must be positive, got {th}")));
            }
        }
        if let Some(&t) = self
            .snapshot_times
            .iter()
            .find(|&&t| !(0.0..=self.t_end).contains(&t))
        {
            return Err(invalid("snapshot_times", format!("{t} outside [0, t_end]")));
        }
        Ok(())
    }

    /// Number of grid steps, `t_end / dt` rounded.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt).round() as usize).max(1)
    }

    /// Macroscopic-jump cutoff for feedback strength `alpha`.
    pub fn threshold(&self, alpha: f64) -> f64 {
        self.blowup_threshold
            .unwrap_or_else(|| (0.05 * alpha).max(20.0 * alpha / self.n_particles as f64))
    }
}

/// Positions and bookkeeping of the particle system at one grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub positions: Vec<f64>,
    pub alive: Vec<bool>,
    /// `A / N`.
    pub mass_per_particle: f64,
    pub lambda_kappa: f64,
    pub s0: f64,
    pub front: f64,
    pub absorbed: usize,
    /// Grid index; the time is `step * dt`.
    pub step: usize,
    pub dt: f64,
}

/// What a single absorption phase did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Absorption {
    pub front_before: f64,
    /// Particles caught by the physical-jump scan from `front_before`.
    pub count: usize,
    /// Additional particles caught when rounding left one at the new front.
    pub extra: usize,
}

impl Absorption {
    pub fn total(&self) -> usize {
        self.count + self.extra
    }
}

/// Pre-jump data retained for an absorption event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub step: usize,
    pub time: f64,
    /// `a * count`, the scan's jump.
    pub size: f64,
    pub count: usize,
    pub front_before: f64,
    pub front_after: f64,
    pub macroscopic: bool,
    /// The t = 0 jump, resolved against the continuous initial profile.
    pub initial: bool,
    /// Per-particle front advance `a`.
    pub feedback: f64,
    /// Sorted pre-jump offsets `x - front_before` not exceeding `window`.
    pub offsets: Vec<f64>,
    pub window: f64,
    /// Alive particles beyond the window.
    pub n_beyond: usize,
}

/// Histogram of the supercooling density ahead of the front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySnapshot {
    pub time: f64,
    pub step: usize,
    pub front: f64,
    pub bin_edges: Vec<f64>,
    /// Mass per unit length in each bin.
    pub density: Vec<f64>,
    pub total_mass: f64,
    pub n_particles: usize,
}

/// Per-grid-point moments `<nu, phi>`, `<nu, d_t phi + kappa d_xx phi>`,
/// `<nu, d_x phi>` of the post-absorption measure, and the test-function
/// mass of the particles absorbed at that grid point, for
/// [`TestFunction::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakMoments {
    /// `<nu, phi(t_start, .)>` before the first absorption phase.
    pub initial: [f64; 4],
    pub m: Vec<[f64; 4]>,
    pub d: Vec<[f64; 4]>,
    pub g: Vec<[f64; 4]>,
    pub absorbed_phi: Vec<[f64; 4]>,
}

impl WeakMoments {
    fn new(state: &ParticleState) -> Self {
        let t = state.time();
        let mut initial = [0.0; 4];
        for (_, x) in state.alive_positions() {
            for (j, f) in TestFunction::ALL.iter().enumerate() {
                initial[j] += f.value(t, x);
            }
        }
        let initial = initial.map(|v| v * state.mass_per_particle);
        Self {
            initial,
            m: Vec::new(),
            d: Vec::new(),
            g: Vec::new(),
            absorbed_phi: Vec::new(),
        }
    }

    fn record(&mut self, state: &ParticleState, kappa: f64, absorbed_phi: [f64; 4]) {
        let t = state.time();
        let w = state.mass_per_particle;
        // particles share one mass, so the sums are scaled once; for phi = 1
        // they are exact counts
        let (mut m, mut d, mut g) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        for (_, x) in state.alive_positions() {
            for (j, f) in TestFunction::ALL.iter().enumerate() {
                m[j] += f.value(t, x);
                d[j] += f.generator(kappa, t, x);
                g[j] += f.dx(t, x);
            }
        }
        self.m.push(m.map(|v| v * w));
        self.d.push(d.map(|v| v * w));
        self.g.push(g.map(|v| v * w));
        self.absorbed_phi.push(absorbed_phi);
    }
}

/// Time series of one particle run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub params: PhysicalParams,
    pub reduced: ReducedParams,
    pub config: SimConfig,
    pub total_mass: f64,
    pub mass_per_particle: f64,
    pub n_particles: usize,
    pub dt: f64,
    /// Grid index of the first recorded point (non-zero after a restart).
    pub start_step: usize,
    pub times: Vec<f64>,
    pub fronts: Vec<f64>,
    pub absorbed: Vec<usize>,
    pub alive: Vec<usize>,
    /// Front increment into each grid point; the first entry is the
    /// initial jump for a fresh run and 0 after a restart.
    pub increments: Vec<f64>,
    pub jump_threshold: f64,
    pub jumps: Vec<JumpRecord>,
    pub snapshots: Vec<DensitySnapshot>,
    pub noise: NoisePath,
    pub weak: Option<WeakMoments>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn loss(&self, k: usize) -> f64 {
        if self.n_particles == 0 {
            0.0
        } else {
            self.absorbed[k] as f64 / self.n_particles as f64
        }
    }

    /// Absorbed mass at grid point `k`.
    pub fn absorbed_mass(&self, k: usize) -> f64 {
        self.mass_per_particle * self.absorbed[k] as f64
    }

    pub fn final_front(&self) -> f64 {
        *self.fronts.last().expect("trajectory has at least one point")
    }

    /// Macroscopic jumps, including the initial one.
    pub fn macroscopic_jumps(&self) -> impl Iterator<Item = &JumpRecord> {
        self.jumps.iter().filter(|j| j.macroscopic)
    }

    pub fn is_macroscopic(&self, k: usize) -> bool {
        self.increments[k] > self.jump_threshold
    }

    /// Largest single front increment over the run.
    pub fn max_increment(&self) -> f64 {
        self.increments.iter().copied().fold(0.0, f64::max)
    }

    /// Time of the first macroscopic increment.
    pub fn first_jump_time(&self) -> Option<f64> {
        (0..self.len()).find(|&k| self.is_macroscopic(k)).map(|k| self.times[k])
    }
}

/// Scratch buffers reused across steps.
#[derive(Debug, Default)]
pub struct StepScratch {
    candidates: Vec<(f64, u32)>,
    absorbed_pre: Vec<f64>,
}

impl StepScratch {
    /// Pre-absorption positions of the particles absorbed by the last call to
    /// [`ParticleState::absorb`].
    pub fn absorbed_positions(&self) -> &[f64] {
        &self.absorbed_pre
    }
}

impl ParticleState {
    /// Stratified sample of `profile` with the initial jump resolved.
    ///
    /// At `t = 0` the empirical measure of a stratified sample cannot see
    /// the jump of the continuous profile (its first particle always sits
    /// strictly ahead of `s0`), so particles inside the analytic initial jump
    /// are absorbed directly; the empirical cascade then finishes the job.
    pub fn init(
        profile: &SupercoolingProfile,
        params: &PhysicalParams,
        cfg: &SimConfig,
    ) -> Result<(Self, Option<JumpRecord>, StepScratch)> {
        params.validate()?;
        cfg.validate()?;
        let mut scratch = StepScratch::default();
        let mut state = Self::sample(profile, params, cfg)?;
        let record = state.initial_cascade(profile, cfg, &mut scratch);
        Ok((state, record, scratch))
    }

    /// Stratified inverse-CDF sample at `t = 0`, before any absorption.
    /// A zero-mass profile gives an empty system.
    pub fn sample(
        profile: &SupercoolingProfile,
        params: &PhysicalParams,
        cfg: &SimConfig,
    ) -> Result<Self> {
        if profile.origin() != params.s0 {
            return Err(Error::InvalidProfile(format!(
                "profile origin {} differs from s0 = {}",
                profile.origin(),
                params.s0
            )));
        }
        let total = profile.total_mass();
        let n = if total > 0.0 { cfg.n_particles } else { 0 };
        let positions = (0..n)
            .map(|i| profile.quantile((i as f64 + 0.5) / n as f64))
            .collect::<Result<Vec<_>>>()?;
        let mass = if n > 0 { total / n as f64 } else { 0.0 };
        Ok(Self::from_positions(positions, mass, params, cfg.dt))
    }

    /// Arbitrary particle configuration, all alive, front at `s0`.
    /// `mass_per_particle` may be zero (no feedback).
    pub fn from_positions(positions: Vec<f64>, mass_per_particle: f64, params: &PhysicalParams, dt: f64) -> Self {
        let n = positions.len();
        Self {
            positions,
            alive: vec![true; n],
            mass_per_particle,
            lambda_kappa: params.lambda_kappa(),
            s0: params.s0,
            front: params.s0,
            absorbed: 0,
            step: 0,
            dt,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn n_alive(&self) -> usize {
        self.positions.len() - self.absorbed
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_per_particle * self.positions.len() as f64
    }

    /// Per-particle front advance `a`.
    pub fn feedback(&self) -> f64 {
        self.mass_per_particle / self.lambda_kappa
    }

    pub fn loss(&self) -> f64 {
        if self.positions.is_empty() {
            0.0
        } else {
            self.absorbed as f64 / self.positions.len() as f64
        }
    }

    pub fn absorbed_mass(&self) -> f64 {
        self.mass_per_particle * self.absorbed as f64
    }

    pub fn alive_positions(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.positions
            .iter()
            .zip(&self.alive)
            .enumerate()
            .filter(|(_, (_, &a))| a)
            .map(|(i, (&x, _))| (i, x))
    }

    fn set_front_from_count(&mut self) {
        self.front = self.s0 + self.feedback() * self.absorbed as f64;
    }

    fn kill(&mut self, i: usize, scratch: &mut StepScratch) {
        debug_assert!(self.alive[i]);
        self.alive[i] = false;
        scratch.absorbed_pre.push(self.positions[i]);
    }

    fn initial_cascade(
        &mut self,
        profile: &SupercoolingProfile,
        cfg: &SimConfig,
        scratch: &mut StepScratch,
    ) -> Option<JumpRecord> {
        scratch.absorbed_pre.clear();
        let j0 = profile.initial_physical_jump(self.lambda_kappa);
        let cut = self.s0 + j0;
        let before = self.front;
        let mut count = 0;
        if j0 > 0.0 {
            for i in 0..self.positions.len() {
                if self.alive[i] && self.positions[i] <= cut {
                    self.kill(i, scratch);
                    count += 1;
                }
            }
            self.absorbed += count;
            self.set_front_from_count();
        }
        let rest = self.absorb_keep(scratch);
        let total = count + rest.total();
        if total == 0 {
            return None;
        }
        let alpha = self.total_mass() / self.lambda_kappa;
        let size = self.front - before;
        Some(JumpRecord {
            step: self.step,
            time: self.time(),
            size,
            count: total,
            front_before: before,
            front_after: self.front,
            macroscopic: size > cfg.threshold(alpha),
            initial: true,
            feedback: self.feedback(),
            offsets: Vec::new(),
            window: j0,
            n_beyond: self.n_alive(),
        })
    }

    /// Moves every alive particle over one grid step and applies the bridge
    /// crossing test against the current front. Returns the number of
    /// particles at or below the front afterwards.
    pub fn diffuse(&mut self, dw: f64, idio: &CounterRng, reduced: &ReducedParams, bridge: bool) -> usize {
        let dt = self.dt;
        let scale = reduced.idiosyncratic_vol() * dt.sqrt();
        let shift = reduced.common_vol() * dw;
        let bridge_denom = reduced.sigma * reduced.sigma * dt;
        let front = self.front;
        let step = self.step as u64;
        let mut at_or_below = 0;
        for (i, (x, &alive)) in self.positions.iter_mut().zip(&self.alive).enumerate() {
            if !alive {
                continue;
            }
            let mut draws = ParticleDraws::new(idio, i as u64, step);
            let old = *x;
            let mut new = old + scale * draws.normal() + shift;
            if new > front && bridge {
                let p = (-2.0 * (old - front) * (new - front) / bridge_denom).exp();
                if draws.uniform() < p {
                    new = front;
                }
            }
            if new <= front {
                at_or_below += 1;
            }
            *x = new;
        }
        self.step += 1;
        at_or_below
    }

    /// Physical-jump scan from the current front. Leaves the sorted
    /// candidate offsets in `scratch` and returns `k*`.
    fn scan(&self, at_or_below: usize, scratch: &mut StepScratch) -> usize {
        let a = self.feedback();
        let n_alive = self.n_alive();
        let buf = &mut scratch.candidates;
        let mut window = a * (2 * at_or_below + 4) as f64;
        loop {
            buf.clear();
            for (i, x) in self.alive_positions() {
                let d = x - self.front;
                if d <= window {
                    buf.push((d, i as u32));
                }
            }
            buf.sort_unstable_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
            let k = buf
                .iter()
                .enumerate()
                .position(|(k, &(d, _))| d > a * k as f64)
                .unwrap_or(buf.len());
            if k < buf.len() || window >= a * buf.len() as f64 || buf.len() == n_alive {
                return k;
            }
            window = (2.0 * window).max(2.0 * a * buf.len() as f64);
        }
    }

    fn absorb_keep(&mut self, scratch: &mut StepScratch) -> Absorption {
        let at_or_below = self.alive_positions().filter(|&(_, x)| x <= self.front).count();
        if at_or_below == 0 {
            return Absorption {
                front_before: self.front,
                ..Absorption::default()
            };
        }
        let k = self.scan(at_or_below, scratch);
        self.apply_scan(k, scratch)
    }

    /// Absorbs the first `k` candidates of the last scan. If rounding in
    /// the new front leaves a particle at or below it, the cascade continues.
    fn apply_scan(&mut self, mut k: usize, scratch: &mut StepScratch) -> Absorption {
        let mut out = Absorption {
            front_before: self.front,
            ..Absorption::default()
        };
        let mut first = true;
        while k > 0 {
            for j in 0..k {
                let i = scratch.candidates[j].1 as usize;
                self.kill(i, scratch);
            }
            self.absorbed += k;
            self.set_front_from_count();
            if first {
                out.count = k;
                first = false;
            } else {
                out.extra += k;
            }
            let leftover = self.alive_positions().filter(|&(_, x)| x <= self.front).count();
            if leftover == 0 {
                break;
            }
            k = self.scan(leftover, scratch);
        }
        out
    }

    /// Resolves absorption after [`ParticleState::diffuse`]: repeatedly
    /// absorbs the particles caught by the physical jump until every alive
    /// particle lies strictly ahead of the front.
    pub fn absorb(&mut self, at_or_below: usize, scratch: &mut StepScratch) -> Absorption {
        scratch.absorbed_pre.clear();
        if at_or_below == 0 {
            return Absorption {
                front_before: self.front,
                ..Absorption::default()
            };
        }
        let k = self.scan(at_or_below, scratch);
        self.apply_scan(k, scratch)
    }

    /// One full grid step.
    pub fn step(
        &mut self,
        dw: f64,
        idio: &CounterRng,
        reduced: &ReducedParams,
        bridge: bool,
        scratch: &mut StepScratch,
    ) -> Absorption {
        let n = self.diffuse(dw, idio, reduced, bridge);
        self.absorb(n, scratch)
    }

    /// Snapshot of the offsets ahead of the front, used to build a jump
    /// record before absorption. `size` is the jump about to be applied.
    fn pre_jump_offsets(&self, size: f64) -> (Vec<f64>, f64, usize) {
        let window = 1.5 * size + 8.0 * self.feedback();
        let mut offsets: Vec<f64> = self
            .alive_positions()
            .map(|(_, x)| x - self.front)
            .filter(|&d| d <= window)
            .collect();
        offsets.sort_unstable_by(f64::total_cmp);
        let beyond = self.n_alive() - offsets.len();
        (offsets, window, beyond)
    }

    /// Histogram of the alive particles over `[front, max position]`.
    pub fn density_snapshot(&self, bins: usize) -> DensitySnapshot {
        let max = self
            .alive_positions()
            .map(|(_, x)| x)
            .fold(self.front, f64::max);
        let span = (max - self.front).max(1e-12);
        let h = span / bins as f64;
        let mut counts = vec![0usize; bins];
        for (_, x) in self.alive_positions() {
            let b = (((x - self.front) / h) as usize).min(bins - 1);
            counts[b] += 1;
        }
        DensitySnapshot {
            time: self.time(),
            step: self.step,
            front: self.front,
            bin_edges: (0..=bins).map(|j| self.front + j as f64 * h).collect(),
            density: counts
                .iter()
                .map(|&c| c as f64 * self.mass_per_particle / h)
                .collect(),
            total_mass: self.total_mass(),
            n_particles: self.positions.len(),
        }
    }
}

/// Runs the particle system on `[0, t_end]` with a freshly generated `W`.
pub fn run(profile: &SupercoolingProfile, params: &PhysicalParams, cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let noise = NoisePath::generate(cfg.seed_common, cfg.dt, cfg.steps());
    run_with_noise(profile, params, cfg, noise)
}

/// Runs the particle system against a given common-noise path.
pub fn run_with_noise(
    profile: &SupercoolingProfile,
    params: &PhysicalParams,
    cfg: &SimConfig,
    noise: NoisePath,
) -> Result<Trajectory> {
    params.validate()?;
    cfg.validate()?;
    let mut scratch = StepScratch::default();
    let mut state = ParticleState::sample(profile, params, cfg)?;
    let kappa = params.kappa;
    let mut weak = cfg.weak_moments.then(|| WeakMoments::new(&state));
    let record = state.initial_cascade(profile, cfg, &mut scratch);
    let initial_phi = absorbed_phi(&state, &scratch);
    if let Some(w) = weak.as_mut() {
        w.record(&state, kappa, initial_phi);
    }
    let mut traj = Recorder::new(&state, params, cfg, noise, params.s0)?;
    if let Some(r) = record {
        traj.jumps.push(r);
    }
    traj.weak = weak;
    evolve(state, params, cfg, traj, &mut scratch)
}

/// Continues a saved state to `cfg.t_end` against `noise`, which must cover
/// the whole grid (increments before `state.step` are ignored).
pub fn resume(
    state: ParticleState,
    params: &PhysicalParams,
    cfg: &SimConfig,
    noise: NoisePath,
) -> Result<Trajectory> {
    params.validate()?;
    cfg.validate()?;
    if state.n_particles() != cfg.n_particles && state.n_particles() != 0 {
        return Err(Error::StateMismatch(format!(
            "state has {} particles, config expects {}",
            state.n_particles(),
            cfg.n_particles
        )));
    }
    if state.dt != cfg.dt {
        return Err(Error::StateMismatch(format!("state dt {} differs from config dt {}", state.dt, cfg.dt)));
    }
    if state.lambda_kappa != params.lambda_kappa() || state.s0 != params.s0 {
        return Err(Error::StateMismatch("state was produced with different parameters".into()));
    }
    if state.step > cfg.steps() {
        return Err(Error::StateMismatch(format!("state step {} beyond the grid", state.step)));
    }
    let mut scratch = StepScratch::default();
    let front = state.front;
    let mut traj = Recorder::new(&state, params, cfg, noise, front)?;
    if cfg.weak_moments {
        let mut w = WeakMoments::new(&state);
        w.record(&state, params.kappa, [0.0; 4]);
        traj.weak = Some(w);
    }
    evolve(state, params, cfg, traj, &mut scratch)
}

/// Runs to the end and also returns the state at grid step `stop`.
pub fn run_and_save(
    profile: &SupercoolingProfile,
    params: &PhysicalParams,
    cfg: &SimConfig,
    stop: usize,
) -> Result<ParticleState> {
    let mut short = cfg.clone();
    short.t_end = stop as f64 * cfg.dt;
    short.validate()?;
    let noise = NoisePath::generate(cfg.seed_common, cfg.dt, stop);
    let mut scratch = StepScratch::default();
    let (mut state, _, _) = ParticleState::init(profile, params, &short)?;
    let reduced = params.reduce(state.total_mass());
    let idio = CounterRng::new(cfg.seed_idio);
    for k in 0..stop {
        state.step(noise.increments[k], &idio, &reduced, cfg.bridge, &mut scratch);
    }
    Ok(state)
}

fn absorbed_phi(state: &ParticleState, scratch: &StepScratch) -> [f64; 4] {
    let t = state.time();
    let mut out = [0.0; 4];
    for &x in scratch.absorbed_positions() {
        for (j, f) in TestFunction::ALL.iter().enumerate() {
            out[j] += f.value(t, x);
        }
    }
    out.map(|v| v * state.mass_per_particle)
}

type Recorder = Trajectory;

impl Trajectory {
    fn new(
        state: &ParticleState,
        params: &PhysicalParams,
        cfg: &SimConfig,
        noise: NoisePath,
        reference_front: f64,
    ) -> Result<Self> {
        noise.ensure_covers(cfg.steps(), cfg.dt)?;
        let total = state.total_mass();
        let reduced = params.reduce(total);
        let mut traj = Trajectory {
            params: *params,
            reduced,
            config: cfg.clone(),
            total_mass: total,
            mass_per_particle: state.mass_per_particle,
            n_particles: state.n_particles(),
            dt: cfg.dt,
            start_step: state.step,
            times: Vec::new(),
            fronts: Vec::new(),
            absorbed: Vec::new(),
            alive: Vec::new(),
            increments: Vec::new(),
            jump_threshold: cfg.threshold(reduced.alpha),
            jumps: Vec::new(),
            snapshots: Vec::new(),
            noise,
            weak: None,
        };
        traj.push(state, state.front - reference_front);
        Ok(traj)
    }

    fn push(&mut self, state: &ParticleState, increment: f64) {
        self.times.push(state.time());
        self.fronts.push(state.front);
        self.absorbed.push(state.absorbed);
        self.alive.push(state.n_alive());
        self.increments.push(increment);
    }
}

fn snapshot_steps(cfg: &SimConfig) -> Vec<usize> {
    let k_max = cfg.steps();
    let mut steps: Vec<usize> = cfg
        .snapshot_times
        .iter()
        .map(|&t| ((t / cfg.dt).round() as usize).min(k_max))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    steps
}

fn evolve(
    mut state: ParticleState,
    params: &PhysicalParams,
    cfg: &SimConfig,
    mut traj: Trajectory,
    scratch: &mut StepScratch,
) -> Result<Trajectory> {
    let reduced = traj.reduced;
    let idio = CounterRng::new(cfg.seed_idio);
    let threshold = traj.jump_threshold;
    let a = state.feedback();
    let snaps = snapshot_steps(cfg);
    let mut next_snap = snaps.partition_point(|&k| k < state.step);
    if next_snap < snaps.len() && snaps[next_snap] == state.step {
        traj.snapshots.push(state.density_snapshot(cfg.density_bins));
        next_snap += 1;
    }
    let k_end = cfg.steps();
    while state.step < k_end {
        let dw = traj.noise.increments[state.step];
        let at_or_below = state.diffuse(dw, &idio, &reduced, cfg.bridge);
        let before = state.front;
        scratch.absorbed_pre.clear();
        if at_or_below > 0 {
            let k = state.scan(at_or_below, scratch);
            let size = a * k as f64;
            let macroscopic = size > threshold;
            let record = (k > 0 && (macroscopic || cfg.retain_all_jumps)).then(|| {
                let (offsets, window, n_beyond) = state.pre_jump_offsets(size);
                JumpRecord {
                    step: state.step,
                    time: state.time(),
                    size,
                    count: k,
                    front_before: before,
                    front_after: f64::NAN,
                    macroscopic,
                    initial: false,
                    feedback: a,
                    offsets,
                    window,
                    n_beyond,
                }
            });
            state.apply_scan(k, scratch);
            if let Some(mut r) = record {
                r.front_after = state.front;
                traj.jumps.push(r);
            }
        }
        if let Some(w) = traj.weak.as_mut() {
            let phi = absorbed_phi(&state, scratch);
            w.record(&state, params.kappa, phi);
        }
        traj.push(&state, state.front - before);
        if next_snap < snaps.len() && snaps[next_snap] == state.step {
            traj.snapshots.push(state.density_snapshot(cfg.density_bins));
            next_snap += 1;
        }
    }
    Ok(traj)
}

/// Outcome of one Monte Carlo replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub index: usize,
    pub seed_common: u64,
    pub seed_idio: u64,
    /// First time with a front increment of at least the cutoff.
    pub first_jump_time: Option<f64>,
    pub max_increment: f64,
    pub final_front: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupEstimate {
    pub jump_cutoff: f64,
    pub dt: f64,
    pub proportion: Proportion,
    pub replicas: Vec<ReplicaSummary>,
}

impl BlowupEstimate {
    pub fn first_jump_times(&self) -> Vec<f64> {
        self.replicas.iter().filter_map(|r| r.first_jump_time).collect()
    }

    pub fn jump_free_fraction(&self) -> f64 {
        let free = self.replicas.iter().filter(|r| r.first_jump_time.is_none()).count();
        free as f64 / self.replicas.len() as f64
    }
}

/// Replica seeds: both seeds are split per replica index, so every replica
/// sees an independent `W`.
pub fn replica_config(cfg: &SimConfig, index: usize) -> SimConfig {
    let mut c = cfg.clone();
    c.seed_common = derive_seed(cfg.seed_common, index as u64);
    c.seed_idio = derive_seed(cfg.seed_idio, index as u64);
    c.snapshot_times.clear();
    c.weak_moments = false;
    c.retain_all_jumps = false;
    c
}

/// Fraction of independent replicas with a front increment of at least
/// `jump_cutoff` (default: the configured macroscopic threshold), with a
/// 95% Wilson interval. Results do not depend on `threads`.
pub fn monte_carlo_blowup(
    profile: &SupercoolingProfile,
    params: &PhysicalParams,
    cfg: &SimConfig,
    n_replicas: usize,
    jump_cutoff: Option<f64>,
    threads: usize,
) -> Result<BlowupEstimate> {
    if n_replicas == 0 {
        return Err(invalid("replicas", "must be >= 1"));
    }
    params.validate()?;
    cfg.validate()?;
    let alpha = params.reduce(profile.total_mass()).alpha;
    let cutoff = jump_cutoff.unwrap_or_else(|| cfg.threshold(alpha));
    let one = |i: usize| -> Result<ReplicaSummary> {
        let c = replica_config(cfg, i);
        let traj = run(profile, params, &c)?;
        let first = (0..traj.len())
            .find(|&k| traj.increments[k] >= cutoff && traj.increments[k] > 0.0)
            .map(|k| traj.times[k]);
        Ok(ReplicaSummary {
            index: i,
            seed_common: c.seed_common,
            seed_idio: c.seed_idio,
            first_jump_time: first,
            max_increment: traj.max_increment(),
            final_front: traj.final_front(),
        })
    };
    let replicas: Vec<ReplicaSummary> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| invalid("threads", e.to_string()))?;
        pool.install(|| (0..n_replicas).into_par_iter().map(one).collect::<Result<Vec<_>>>())?
    } else {
        (0..n_replicas).map(one).collect::<Result<Vec<_>>>()?
    };
    let jumped = replicas.iter().filter(|r| r.first_jump_time.is_some()).count();
    Ok(BlowupEstimate {
        jump_cutoff: cutoff,
        dt: cfg.dt,
        proportion: Proportion::wilson(jumped, n_replicas, Z95),
        replicas,
    })
}
