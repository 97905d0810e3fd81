//! Scenario files: TOML with a fixed schema, parsed into a validated
//! [`Scenario`] or a list of every problem found.
//!
//! ```toml
//! mode = "simulate"            # optional; the subcommand takes precedence
//! output_dir = "out"           # optional
//! replicas = 20                # optional, blowup-prob only
//!
//! [params]
//! kappa = 0.5
//! lambda = 1.0
//! theta = 0.25
//! s0 = 0.0
//!
//! [profile]
//! scale = "lambda_kappa"       # optional: "absolute" (default) or "lambda_kappa"
//! pieces = [[0.3, 0.0], [1.3, 0.8]]   # (right breakpoint, density), starting at s0
//!
//! [sim]
//! n_particles = 10000
//! dt = 1e-3
//! t_end = 0.5
//! seed_common = 1
//! seed_idio = 2
//! snapshots = [0.1, 0.5]       # optional
//! density_bins = 50            # optional
//! blowup_threshold = 0.01      # optional, absolute front increment
//! bridge = true                # optional
//! weak_moments = false         # optional
//! retain_all_jumps = false     # optional
//!
//! [picard]                     # optional
//! m_samples = 10000
//! max_iterations = 200
//! tol = 0.0
//! seed = 3
//!
//! [cascade]                    # optional
//! epsilons = [1e-3, 1e-4, 1e-5]
//! tol = 1e-12
//! max_iterations = 1000000
//! agreement_tol = 1e-6
//!
//! [check]                      # optional
//! trajectory = "out/trajectory.json"
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};
use stefan_core::cascade::{DEFAULT_MAX_ITERATIONS, DEFAULT_TOL};
use stefan_core::profile::ProfileSpec;
use stefan_core::{PhysicalParams, SimConfig, SupercoolingProfile};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Picard,
    BlowupProb,
    Cascade,
    Check,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Picard => "picard",
            Mode::BlowupProb => "blowup-prob",
            Mode::Cascade => "cascade",
            Mode::Check => "check",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Mode::Simulate, Mode::Picard, Mode::BlowupProb, Mode::Cascade, Mode::Check]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// One problem in a scenario file, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardSettings {
    pub m_samples: usize,
    pub max_iterations: usize,
    pub tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeSettings {
    pub epsilons: Vec<f64>,
    pub tol: f64,
    pub max_iterations: usize,
    pub agreement_tol: f64,
}

impl Default for CascadeSettings {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-3, 1e-4, 1e-5, 1e-6],
            tol: DEFAULT_TOL,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            agreement_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub mode: Option<Mode>,
    pub output_dir: Option<PathBuf>,
    pub replicas: usize,
    pub params: PhysicalParams,
    #[serde(serialize_with = "profile_spec")]
    pub profile: SupercoolingProfile,
    pub sim: SimConfig,
    pub picard: PicardSettings,
    pub cascade: CascadeSettings,
    pub check_trajectory: Option<PathBuf>,
    /// Hex SHA-256 of the scenario text.
    #[serde(skip)]
    pub config_sha256: String,
}

fn profile_spec<S: serde::Serializer>(p: &SupercoolingProfile, s: S) -> Result<S::Ok, S::Error> {
    ProfileSpec::from(p.clone()).serialize(s)
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Typed access to one table that records every error and every key read,
/// so unread keys can be reported as unknown.
struct Section<'a> {
    path: String,
    table: &'a Table,
    seen: BTreeSet<&'static str>,
}

impl<'a> Section<'a> {
    fn new(path: &str, table: &'a Table) -> Self {
        Self {
            path: path.to_string(),
            table,
            seen: BTreeSet::new(),
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn get(&mut self, k: &'static str, required: bool, errors: &mut Vec<ConfigError>) -> Option<&'a Value> {
        self.seen.insert(k);
        let v = self.table.get(k);
        if v.is_none() && required {
            errors.push(err(self.key(k), "missing required key"));
        }
        v
    }

    fn typed<T>(
        &mut self,
        k: &'static str,
        required: bool,
        expected: &str,
        convert: impl Fn(&'a Value) -> Option<T>,
        errors: &mut Vec<ConfigError>,
    ) -> Option<T> {
        let v = self.get(k, required, errors)?;
        let out = convert(v);
        if out.is_none() {
            errors.push(err(self.key(k), format!("expected {expected}, found {}", v.type_str())));
        }
        out
    }

    fn f64(&mut self, k: &'static str, required: bool, errors: &mut Vec<ConfigError>) -> Option<f64> {
        self.typed(k, required, "a number", as_f64, errors)
    }

    fn u64(&mut self, k: &'static str, required: bool, errors: &mut Vec<ConfigError>) -> Option<u64> {
        self.typed(
            k,
            required,
            "a non-negative integer",
            |v| v.as_integer().and_then(|i| u64::try_from(i).ok()),
            errors,
        )
    }

    fn usize(&mut self, k: &'static str, required: bool, errors: &mut Vec<ConfigError>) -> Option<usize> {
        self.u64(k, required, errors).map(|v| v as usize)
    }

    fn bool(&mut self, k: &'static str, errors: &mut Vec<ConfigError>) -> Option<bool> {
        self.typed(k, false, "a boolean", Value::as_bool, errors)
    }

    fn str(&mut self, k: &'static str, errors: &mut Vec<ConfigError>) -> Option<&'a str> {
        self.typed(k, false, "a string", Value::as_str, errors)
    }

    fn f64_list(&mut self, k: &'static str, required: bool, errors: &mut Vec<ConfigError>) -> Option<Vec<f64>> {
        self.typed(
            k,
            required,
            "an array of numbers",
            |v| v.as_array()?.iter().map(as_f64).collect(),
            errors,
        )
    }

    fn sub(&mut self, k: &'static str, required: bool, errors: &mut Vec<ConfigError>) -> Option<Section<'a>> {
        let path = self.key(k);
        let t = self.typed(k, required, "a table", Value::as_table, errors)?;
        Some(Section::new(&path, t))
    }

    fn finish(self, errors: &mut Vec<ConfigError>) {
        for k in self.table.keys() {
            if !self.seen.contains(k.as_str()) {
                errors.push(err(self.key(k), "unknown key"));
            }
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn err(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        message: message.into(),
    }
}

/// Parses and validates a scenario, collecting every error rather than
/// stopping at the first one.
pub fn parse_scenario(text: &str) -> Result<Scenario, Vec<ConfigError>> {
    let root: Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            // duplicate keys and syntax errors surface here
            return Err(vec![err("", e.message().to_string() + &location(text, e.span()))]);
        }
    };
    let mut errors = Vec::new();
    let mut top = Section::new("", &root);

    let mode = top.str("mode", &mut errors).and_then(|s| {
        let m = Mode::parse(s);
        if m.is_none() {
            errors.push(err(
                "mode",
                format!("unknown mode `{s}`; expected simulate, picard, blowup-prob, cascade or check"),
            ));
        }
        m
    });
    let output_dir = top.str("output_dir", &mut errors).map(PathBuf::from);
    let replicas = top.usize("replicas", false, &mut errors).unwrap_or(20);
    if replicas == 0 {
        errors.push(err("replicas", "must be >= 1"));
    }

    let params = top.sub("params", true, &mut errors).and_then(|mut s| {
        let kappa = s.f64("kappa", true, &mut errors);
        let lambda = s.f64("lambda", true, &mut errors);
        let theta = s.f64("theta", true, &mut errors);
        let s0 = s.f64("s0", true, &mut errors);
        s.finish(&mut errors);
        let p = PhysicalParams::new(kappa?, lambda?, theta?, s0?);
        p.map_err(|e| errors.push(err("params", e.to_string()))).ok()
    });

    let profile = top.sub("profile", true, &mut errors).and_then(|mut s| {
        let scale = match s.str("scale", &mut errors) {
            None | Some("absolute") => Some(1.0),
            Some("lambda_kappa") => params.map(|p| p.lambda_kappa()),
            Some(other) => {
                errors.push(err(
                    "profile.scale",
                    format!("unknown scale `{other}`; expected absolute or lambda_kappa"),
                ));
                None
            }
        };
        let pieces = s.typed(
            "pieces",
            true,
            "an array of [right breakpoint, density] pairs",
            |v| {
                v.as_array()?
                    .iter()
                    .map(|p| match p.as_array().map(Vec::as_slice) {
                        Some([b, u]) => Some((as_f64(b)?, as_f64(u)?)),
                        _ => None,
                    })
                    .collect::<Option<Vec<_>>>()
            },
            &mut errors,
        );
        s.finish(&mut errors);
        let (scale, pieces, params) = (scale?, pieces?, params?);
        let scaled: Vec<(f64, f64)> = pieces.iter().map(|&(b, u)| (b, u * scale)).collect();
        SupercoolingProfile::new(params.s0, &scaled)
            .map_err(|e| errors.push(err("profile", e.to_string())))
            .ok()
    });

    let sim = top.sub("sim", true, &mut errors).and_then(|mut s| {
        let d = SimConfig::default();
        let n = s.usize("n_particles", true, &mut errors);
        let dt = s.f64("dt", true, &mut errors);
        let t_end = s.f64("t_end", true, &mut errors);
        let seed_common = s.u64("seed_common", true, &mut errors);
        let seed_idio = s.u64("seed_idio", true, &mut errors);
        let snapshots = s.f64_list("snapshots", false, &mut errors).unwrap_or_default();
        let bins = s.usize("density_bins", false, &mut errors).unwrap_or(d.density_bins);
        let threshold = s.f64("blowup_threshold", false, &mut errors);
        let bridge = s.bool("bridge", &mut errors).unwrap_or(d.bridge);
        let weak = s.bool("weak_moments", &mut errors).unwrap_or(d.weak_moments);
        let retain = s.bool("retain_all_jumps", &mut errors).unwrap_or(d.retain_all_jumps);
        s.finish(&mut errors);
        let cfg = SimConfig {
            n_particles: n?,
            dt: dt?,
            t_end: t_end?,
            seed_common: seed_common?,
            seed_idio: seed_idio?,
            snapshot_times: snapshots,
            blowup_threshold: threshold,
            density_bins: bins,
            bridge,
            weak_moments: weak,
            retain_all_jumps: retain,
        };
        cfg.validate()
            .map(|_| cfg)
            .map_err(|e| errors.push(err("sim", e.to_string())))
            .ok()
    });

    let picard = {
        let fallback_m = sim.as_ref().map_or(1, |c| c.n_particles);
        let fallback_seed = sim.as_ref().map_or(0, |c| c.seed_idio);
        match top.sub("picard", false, &mut errors) {
            Some(mut s) => {
                let p = PicardSettings {
                    m_samples: s.usize("m_samples", false, &mut errors).unwrap_or(fallback_m),
                    max_iterations: s.usize("max_iterations", false, &mut errors).unwrap_or(200),
                    tol: s.f64("tol", false, &mut errors).unwrap_or(0.0),
                    seed: s.u64("seed", false, &mut errors).unwrap_or(fallback_seed),
                };
                s.finish(&mut errors);
                if p.m_samples == 0 {
                    errors.push(err("picard.m_samples", "must be >= 1"));
                }
                if p.max_iterations == 0 {
                    errors.push(err("picard.max_iterations", "must be >= 1"));
                }
                if !(p.tol >= 0.0) {
                    errors.push(err("picard.tol", "must be >= 0"));
                }
                p
            }
            None => PicardSettings {
                m_samples: fallback_m,
                max_iterations: 200,
                tol: 0.0,
                seed: fallback_seed,
            },
        }
    };

    let cascade = match top.sub("cascade", false, &mut errors) {
        Some(mut s) => {
            let d = CascadeSettings::default();
            let c = CascadeSettings {
                epsilons: s.f64_list("epsilons", false, &mut errors).unwrap_or(d.epsilons),
                tol: s.f64("tol", false, &mut errors).unwrap_or(d.tol),
                max_iterations: s.usize("max_iterations", false, &mut errors).unwrap_or(d.max_iterations),
                agreement_tol: s.f64("agreement_tol", false, &mut errors).unwrap_or(d.agreement_tol),
            };
            s.finish(&mut errors);
            if c.epsilons.len() < 2 || c.epsilons.iter().any(|&e| !(e > 0.0)) {
                errors.push(err("cascade.epsilons", "need at least two positive values"));
            }
            if !(c.tol > 0.0) {
                errors.push(err("cascade.tol", "must be > 0"));
            }
            if !(c.agreement_tol >= 0.0) {
                errors.push(err("cascade.agreement_tol", "must be >= 0"));
            }
            c
        }
        None => CascadeSettings::default(),
    };

    let check_trajectory = top.sub("check", false, &mut errors).and_then(|mut s| {
        let p = s.str("trajectory", &mut errors).map(PathBuf::from);
        s.finish(&mut errors);
        p
    });
    top.finish(&mut errors);

    match (params, profile, sim) {
        (Some(params), Some(profile), Some(sim)) if errors.is_empty() => Ok(Scenario {
            mode,
            output_dir,
            replicas,
            params,
            profile,
            sim,
            picard,
            cascade,
            check_trajectory,
            config_sha256: sha256_hex(text),
        }),
        _ => Err(errors),
    }
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
