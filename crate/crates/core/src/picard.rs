//! The Gamma map on front paths and its Picard iteration.
//!
//! Conditional on a frozen common-noise path, `Gamma[s](t)` is `s0` plus
//! `alpha` times the probability that a particle started from the initial
//! profile has hit the barrier `s` by time `t`. Probabilities are estimated
//! with `m` paths started at stratified quantiles of the profile; the same
//! counter-based draws are reused for every barrier, so `Gamma` is exactly
//! monotone in `s` and the iterates from the constant path `s0` increase to
//! the minimal fixed point of the discretized map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{PhysicalParams, ReducedParams};
use crate::particle::Trajectory;
use crate::profile::SupercoolingProfile;
use crate::rng::{CounterRng, NoisePath, ParticleDraws};

/// Non-decreasing front on the uniform grid `t_k = k dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPath {
    pub s0: f64,
    pub dt: f64,
    /// `values[k] = s(t_k)`, right-continuous.
    pub values: Vec<f64>,
    /// Seed of the common noise the path was computed against.
    pub noise_seed: Option<u64>,
}

impl FrontPath {
    pub fn constant(s0: f64, value: f64, dt: f64, steps: usize) -> Self {
        Self {
            s0,
            dt,
            values: vec![value; steps + 1],
            noise_seed: None,
        }
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|k| k as f64 * self.dt).collect()
    }

    /// Grid increments larger than `threshold`, as `(k, size)`; the entry
    /// for `k = 0` is `s(0) - s0`.
    pub fn jumps(&self, threshold: f64) -> Vec<(usize, f64)> {
        let mut prev = self.s0;
        let mut out = Vec::new();
        for (k, &v) in self.values.iter().enumerate() {
            if v - prev > threshold {
                out.push((k, v - prev));
            }
            prev = v;
        }
        out
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.values[0] >= self.s0 && self.values.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn sup_distance(&self, other: &FrontPath) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::GridMismatch(format!(
                "{} vs {} grid points",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Pointwise comparison with `other`.
    pub fn ordering(&self, other: &FrontPath) -> IterateOrdering {
        let ge = self.values.iter().zip(&other.values).all(|(a, b)| a >= b);
        let le = self.values.iter().zip(&other.values).all(|(a, b)| a <= b);
        match (ge, le) {
            (true, true) => IterateOrdering::Equal,
            (true, false) => IterateOrdering::Increasing,
            (false, true) => IterateOrdering::Decreasing,
            (false, false) => IterateOrdering::Crossing,
        }
    }
}

/// How an iterate compares with its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterateOrdering {
    Equal,
    Increasing,
    Decreasing,
    Crossing,
}

/// Hit index meaning "not absorbed on the grid".
const NEVER: u32 = u32::MAX;

/// Gamma map for a fixed profile, parameters, noise path and sample set.
#[derive(Debug, Clone)]
pub struct GammaMap {
    s0: f64,
    dt: f64,
    steps: usize,
    reduced: ReducedParams,
    noise: NoisePath,
    idio: CounterRng,
    bridge: bool,
    starts: Vec<f64>,
    /// Paths starting at or below this are absorbed by the initial jump.
    initial_cut: f64,
    feedback: f64,
    threads: usize,
}

impl GammaMap {
    /// `m_samples` paths started at the `(i + 0.5) / m` quantiles of the
    /// profile and driven by the counter-based draws of `seed`.
    ///
    /// The initial jump is resolved against the continuous profile: paths
    /// starting inside `[s0, s0 + J0]` count as absorbed at `t = 0` whatever
    /// the barrier, which restarts the problem just after the jump.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        profile: &SupercoolingProfile,
        params: &PhysicalParams,
        noise: &NoisePath,
        steps: usize,
        m_samples: usize,
        seed: u64,
        bridge: bool,
        threads: usize,
    ) -> Result<Self> {
        params.validate()?;
        if m_samples == 0 {
            return Err(invalid("m_samples", "must be >= 1"));
        }
        if profile.origin() != params.s0 {
            return Err(Error::InvalidProfile(format!(
                "profile origin {} differs from s0 = {}",
                profile.origin(),
                params.s0
            )));
        }
        noise.ensure_covers(steps, noise.dt)?;
        let total = profile.total_mass();
        let (starts, mass) = if total > 0.0 {
            let starts = (0..m_samples)
                .map(|i| profile.quantile((i as f64 + 0.5) / m_samples as f64))
                .collect::<Result<Vec<_>>>()?;
            (starts, total / m_samples as f64)
        } else {
            (Vec::new(), 0.0)
        };
        let lk = params.lambda_kappa();
        let j0 = profile.initial_physical_jump(lk);
        Ok(Self {
            s0: params.s0,
            dt: noise.dt,
            steps,
            reduced: params.reduce(total),
            noise: noise.clone(),
            idio: CounterRng::new(seed),
            bridge,
            starts,
            initial_cut: if j0 > 0.0 { params.s0 + j0 } else { f64::NEG_INFINITY },
            feedback: mass / lk,
            threads: threads.max(1),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn reduced(&self) -> &ReducedParams {
        &self.reduced
    }

    /// Hit index of path `i` against barrier `s`, searching no further than
    /// `limit` (a hit at `limit` is known).
    fn hit_index(&self, i: usize, s: &[f64], limit: u32) -> u32 {
        let mut x = self.starts[i];
        if x <= self.initial_cut || x <= s[0] {
            return 0;
        }
        let scale = self.reduced.idiosyncratic_vol() * self.dt.sqrt();
        let common = self.reduced.common_vol();
        let bridge_denom = self.reduced.sigma * self.reduced.sigma * self.dt;
        let end = (self.steps as u32).min(limit);
        for k in 0..end {
            let front = s[k as usize];
            let mut draws = ParticleDraws::new(&self.idio, i as u64, k as u64);
            let old = x;
            let new = old + scale * draws.normal() + common * self.noise.increments[k as usize];
            if new > front && self.bridge {
                let p = (-2.0 * (old - front) * (new - front) / bridge_denom).exp();
                if draws.uniform() < p {
                    return k + 1;
                }
            }
            if new <= s[k as usize + 1] {
                return k + 1;
            }
            x = new;
        }
        limit
    }

    fn hits(&self, s: &[f64], hints: Option<&[u32]>) -> Vec<u32> {
        let limit = |i: usize| hints.map_or(NEVER, |h| h[i]);
        if self.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .expect("thread pool");
            pool.install(|| {
                (0..self.starts.len())
                    .into_par_iter()
                    .map(|i| self.hit_index(i, s, limit(i)))
                    .collect()
            })
        } else {
            (0..self.starts.len()).map(|i| self.hit_index(i, s, limit(i))).collect()
        }
    }

    fn front_from_hits(&self, hits: &[u32]) -> FrontPath {
        let mut per_step = vec![0usize; self.steps + 1];
        for &h in hits {
            if h != NEVER {
                per_step[h as usize] += 1;
            }
        }
        let mut absorbed = 0usize;
        let values = per_step
            .iter()
            .map(|&c| {
                absorbed += c;
                self.s0 + self.feedback * absorbed as f64
            })
            .collect();
        FrontPath {
            s0: self.s0,
            dt: self.dt,
            values,
            noise_seed: Some(self.noise.seed),
        }
    }

    fn check_grid(&self, s: &FrontPath) -> Result<()> {
        if s.values.len() != self.steps + 1 || (s.dt - self.dt).abs() > 1e-15 * self.dt {
            return Err(Error::GridMismatch(format!(
                "path has {} points with dt {}, map expects {} with dt {}",
                s.values.len(),
                s.dt,
                self.steps + 1,
                self.dt
            )));
        }
        Ok(())
    }

    pub fn apply(&self, s: &FrontPath) -> Result<FrontPath> {
        self.check_grid(s)?;
        Ok(self.front_from_hits(&self.hits(&s.values, None)))
    }

    /// As [`GammaMap::apply`], reusing hit indices computed for a barrier
    /// that lies pointwise below `s`: a higher barrier can only bring hits
    /// forward, so each path is simulated up to its previous hit only.
    fn apply_with_hints(&self, s: &FrontPath, hints: Option<&[u32]>) -> Result<(FrontPath, Vec<u32>)> {
        self.check_grid(s)?;
        let hits = self.hits(&s.values, hints);
        Ok((self.front_from_hits(&hits), hits))
    }
}

/// One application of the Gamma map with default settings (bridge on, one
/// thread).
pub fn gamma_map(
    s: &FrontPath,
    profile: &SupercoolingProfile,
    params: &PhysicalParams,
    noise: &NoisePath,
    m_samples: usize,
    seed: u64,
) -> Result<FrontPath> {
    GammaMap::new(profile, params, noise, s.steps(), m_samples, seed, true, 1)?.apply(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardOutcome {
    pub front: FrontPath,
    /// `sup_t |s^(n) - s^(n-1)|` per iteration, starting with the distance
    /// of the first iterate from the constant path `s0`.
    pub residual_history: Vec<f64>,
    pub ordering: Vec<IterateOrdering>,
    pub converged: bool,
}

impl PicardOutcome {
    pub fn iterations(&self) -> usize {
        self.residual_history.len()
    }
}

/// Iterates `s^(n) = Gamma[s^(n-1)]` from the constant path `s0` until the
/// sup-norm change is at most `tol` or `max_iters` applications are spent.
/// Non-convergence is reported in the outcome, not as an error.
pub fn iterate_to_fixed_point(map: &GammaMap, max_iters: usize, tol: f64) -> PicardOutcome {
    let mut current = FrontPath::constant(map.s0, map.s0, map.dt, map.steps);
    current.noise_seed = Some(map.noise.seed);
    let mut hints: Option<Vec<u32>> = None;
    let mut residual_history = Vec::new();
    let mut ordering = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let (next, hits) = map
            .apply_with_hints(&current, hints.as_deref())
            .expect("iterates live on the map's grid");
        let order = next.ordering(&current);
        let residual = next.sup_distance(&current).expect("same grid");
        residual_history.push(residual);
        ordering.push(order);
        // hints stay valid while the barrier keeps rising
        hints = matches!(order, IterateOrdering::Increasing | IterateOrdering::Equal).then_some(hits);
        current = next;
        if residual <= tol {
            converged = true;
            break;
        }
    }
    PicardOutcome {
        front: current,
        residual_history,
        ordering,
        converged,
    }
}

/// Sup-norm distance between a particle front and a front path on the same
/// grid and common noise.
pub fn compare_with_particles(traj: &Trajectory, fp: &FrontPath) -> Result<f64> {
    if let Some(seed) = fp.noise_seed {
        if seed != traj.noise.seed {
            return Err(Error::NoiseMismatch(format!(
                "trajectory noise seed {} differs from front path seed {}",
                traj.noise.seed, seed
            )));
        }
    }
    if traj.start_step != 0 || traj.fronts.len() != fp.values.len() || traj.dt != fp.dt {
        return Err(Error::GridMismatch(format!(
            "trajectory has {} points from step {} with dt {}, front path {} with dt {}",
            traj.fronts.len(),
            traj.start_step,
            traj.dt,
            fp.values.len(),
            fp.dt
        )));
    }
    Ok(traj
        .fronts
        .iter()
        .zip(&fp.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particle::{run_with_noise, SimConfig};

    fn params(theta: f64) -> PhysicalParams {
        PhysicalParams::new(0.5, 1.0, theta, 0.0).unwrap()
    }

    #[test]
    fn zero_mass_maps_to_s0() {
        let p = params(0.0);
        let prof = SupercoolingProfile::empty(0.0);
        let noise = NoisePath::zero(0.01, 50);
        let s = FrontPath::constant(0.0, 0.0, 0.01, 50);
        let out = gamma_map(&s, &prof, &p, &noise, 100, 1).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        let map = GammaMap::new(&prof, &p, &noise, 50, 100, 1, true, 1).unwrap();
        let res = iterate_to_fixed_point(&map, 10, 0.0);
        assert!(res.converged);
        assert_eq!(res.iterations(), 1);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let p = params(0.0);
        let prof = SupercoolingProfile::new(0.0, &[(1.0, 0.3)]).unwrap();
        let noise = NoisePath::zero(0.01, 50);
        let s = FrontPath::constant(0.0, 0.0, 0.01, 40);
        let map = GammaMap::new(&prof, &p, &noise, 50, 10, 1, true, 1).unwrap();
        assert!(matches!(map.apply(&s), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn gamma_is_monotone_in_the_barrier() {
        let p = params(0.4);
        let lk = p.lambda_kappa();
        let prof = SupercoolingProfile::new(0.0, &[(1.0, 0.7 * lk)]).unwrap();
        let steps = 200;
        let noise = NoisePath::generate(9, 5e-3, steps);
        let map = GammaMap::new(&prof, &p, &noise, steps, 2000, 4, true, 1).unwrap();
        let low = FrontPath::constant(0.0, 0.0, 5e-3, steps);
        let mut high = low.clone();
        for (k, v) in high.values.iter_mut().enumerate() {
            *v = 0.2 * (k as f64 / steps as f64).sqrt();
        }
        let g_low = map.apply(&low).unwrap();
        let g_high = map.apply(&high).unwrap();
        assert!(g_low.values.iter().zip(&g_high.values).all(|(a, b)| a <= b));
    }

    #[test]
    fn iterates_increase_and_stay_bounded() {
        let p = params(0.0);
        let lk = p.lambda_kappa();
        let prof = SupercoolingProfile::new(0.0, &[(1.0, 0.5 * lk)]).unwrap();
        let steps = 200;
        let noise = NoisePath::zero(5e-3, steps);
        let map = GammaMap::new(&prof, &p, &noise, steps, 2000, 4, true, 1).unwrap();
        let res = iterate_to_fixed_point(&map, 100, 0.0);
        assert!(res.converged);
        assert!(res.ordering[..res.ordering.len() - 1]
            .iter()
            .all(|&o| o == IterateOrdering::Increasing));
        assert!(res.front.is_non_decreasing());
        let alpha = map.reduced().alpha;
        assert!(res.front.values.iter().all(|&v| v <= alpha + 1e-12));
        assert!(res.residual_history.windows(2).skip(1).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn hint_reuse_gives_the_same_iterates() {
        let p = params(0.5);
        let lk = p.lambda_kappa();
        let prof = SupercoolingProfile::new(0.0, &[(0.5, 0.5 * lk), (1.0, 2.0 * lk)]).unwrap();
        let steps = 100;
        let noise = NoisePath::generate(2, 1e-2, steps);
        let map = GammaMap::new(&prof, &p, &noise, steps, 1000, 3, true, 1).unwrap();
        let res = iterate_to_fixed_point(&map, 200, 0.0);
        assert!(res.converged);
        let again = map.apply(&res.front).unwrap();
        assert_eq!(again, res.front);
    }

    #[test]
    fn fixed_point_reproduces_particle_front_with_shared_draws() {
        // same draws for particles and paths: the discrete systems coincide
        let p = params(0.5);
        let lk = p.lambda_kappa();
        let prof = SupercoolingProfile::new(0.0, &[(0.5, 0.5 * lk), (1.0, 2.0 * lk)]).unwrap();
        let cfg = SimConfig {
            n_particles: 800,
            dt: 1e-2,
            t_end: 1.0,
            seed_common: 11,
            seed_idio: 12,
            ..SimConfig::default()
        };
        let noise = NoisePath::generate(cfg.seed_common, cfg.dt, cfg.steps());
        let traj = run_with_noise(&prof, &p, &cfg, noise.clone()).unwrap();
        let map = GammaMap::new(&prof, &p, &noise, cfg.steps(), 800, cfg.seed_idio, true, 1).unwrap();
        let res = iterate_to_fixed_point(&map, 1000, 0.0);
        assert!(res.converged);
        assert_eq!(compare_with_particles(&traj, &res.front).unwrap(), 0.0);
    }

    #[test]
    fn unstable_start_jumps_by_the_physical_jump() {
        let p = params(0.0);
        let lk = p.lambda_kappa();
        let prof = SupercoolingProfile::new(0.0, &[(0.3, 2.0 * lk), (2.0, 0.2 * lk)]).unwrap();
        let steps = 50;
        let noise = NoisePath::zero(1e-2, steps);
        let m = 4000;
        let map = GammaMap::new(&prof, &p, &noise, steps, m, 1, true, 1).unwrap();
        let res = iterate_to_fixed_point(&map, 100, 0.0);
        let expected = prof.initial_physical_jump(lk);
        assert!((res.front.values[0] - expected).abs() <= 2.0 * map.feedback, "{}", res.front.values[0]);
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let p = params(0.3);
        let prof = SupercoolingProfile::new(0.0, &[(1.0, 0.3)]).unwrap();
        let cfg = SimConfig {
            n_particles: 100,
            dt: 1e-2,
            t_end: 0.5,
            ..SimConfig::default()
        };
        let traj = run_with_noise(&prof, &p, &cfg, NoisePath::generate(1, 1e-2, 50)).unwrap();
        let mut fp = FrontPath::constant(0.0, 0.0, 1e-2, 50);
        fp.noise_seed = Some(99);
        assert!(matches!(compare_with_particles(&traj, &fp), Err(Error::NoiseMismatch(_))));
        fp.noise_seed = Some(1);
        assert!(compare_with_particles(&traj, &fp).is_ok());
    }
}
