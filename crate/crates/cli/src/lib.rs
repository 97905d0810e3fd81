//! Command-line front end: parses a scenario, runs one mode and writes
//! CSV, JSON and SVG artifacts into an output directory.

pub mod scenario;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use stefan_core::cascade::{cascade_epsilon, cascade_limit};
use stefan_core::diagnostics::{density_bound_check, threshold_regime_check, DiagnosticsReport};
use stefan_core::io::{write_cascade_csv, write_front_csv, write_residuals_csv, write_snapshot_csv, write_trajectory_csv};
use stefan_core::particle::{monte_carlo_blowup, run};
use stefan_core::picard::{iterate_to_fixed_point, GammaMap, IterateOrdering};
use stefan_core::{NoisePath, ProfileMass, Trajectory};

pub use scenario::{parse_scenario, ConfigError, Mode, Scenario};
use svg::{line_chart, Series};

/// Version of the `summary.json` and `report.json` layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "STEFAN_OUT";

const DEFAULT_OUT: &str = "stefan-out";

#[derive(Debug, Parser)]
#[command(name = "stefan", version, about = "Supercooled Stefan problem with transport noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the scenario.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,

    /// Worker threads for Picard sampling and Monte Carlo replicas.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[arg(long, global = true)]
    pub seed_common: Option<u64>,

    #[arg(long, global = true)]
    pub seed_idio: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the particle system once.
    Simulate,
    /// Iterate the front map to its minimal fixed point.
    Picard,
    /// Estimate the probability of a macroscopic jump over independent replicas.
    BlowupProb,
    /// Resolve the initial jump of the profile through the vanishing heat cascade.
    Cascade,
    /// Run every diagnostic on a saved trajectory.
    Check {
        /// A `trajectory.json` written by `simulate`; overrides `[check] trajectory`.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
}

impl Command {
    fn mode(&self) -> Mode {
        match self {
            Command::Simulate => Mode::Simulate,
            Command::Picard => Mode::Picard,
            Command::BlowupProb => Mode::BlowupProb,
            Command::Cascade => Mode::Cascade,
            Command::Check { .. } => Mode::Check,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Config(Vec<ConfigError>),
    Runtime(String),
    CheckFailed(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::CheckFailed(_) => 3,
        }
    }

    /// Machine-readable description written to stderr.
    pub fn to_json(&self) -> Value {
        let (kind, messages): (&str, Vec<String>) = match self {
            Failure::Config(errs) => ("config", errs.iter().map(ToString::to_string).collect()),
            Failure::Runtime(m) => ("runtime", vec![m.clone()]),
            Failure::CheckFailed(m) => ("check", vec![m.clone()]),
        };
        json!({ "error": { "kind": kind, "exit_code": self.exit_code(), "messages": messages } })
    }
}

impl From<stefan_core::Error> for Failure {
    fn from(e: stefan_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(format!("I/O error: {e}"))
    }
}

fn config_failure(key: &str, message: impl Into<String>) -> Failure {
    Failure::Config(vec![ConfigError {
        key: key.to_string(),
        message: message.into(),
    }])
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let f = config_failure("arguments", e.to_string().trim_end());
            eprintln!("{}", f.to_json());
            return f.exit_code();
        }
    };
    let start = Instant::now();
    match execute(&cli) {
        Ok(dir) => {
            eprintln!(
                "wrote {} in {:.2}s",
                dir.display(),
                start.elapsed().as_secs_f64()
            );
            0
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.exit_code()
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_failure("config", format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text).map_err(Failure::Config)
}

fn output_dir(cli: &Cli, scn: Option<&Scenario>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| scn.and_then(|s| s.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs the command and returns the output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf, Failure> {
    if cli.threads == 0 {
        return Err(config_failure("threads", "must be >= 1"));
    }
    let scn = match &cli.config {
        Some(p) => Some(load_scenario(p)?),
        None => None,
    };
    if let Command::Check { trajectory } = &cli.command {
        let path = trajectory
            .clone()
            .or_else(|| scn.as_ref().and_then(|s| s.check_trajectory.clone()))
            .ok_or_else(|| config_failure("trajectory", "pass --trajectory or set [check] trajectory"))?;
        let out = output_dir(cli, scn.as_ref());
        fs::create_dir_all(&out)?;
        check(&path, &out)?;
        return Ok(out);
    }
    let mut scn = scn.ok_or_else(|| config_failure("config", "--config is required for this command"))?;
    if let Some(s) = cli.seed_common {
        scn.sim.seed_common = s;
    }
    if let Some(s) = cli.seed_idio {
        scn.sim.seed_idio = s;
    }
    scn.mode = Some(cli.command.mode());
    let out = output_dir(cli, Some(&scn));
    fs::create_dir_all(&out)?;
    let result = match cli.command {
        Command::Simulate => simulate(&scn, &out)?,
        Command::Picard => picard(&scn, &out, cli.threads)?,
        Command::BlowupProb => blowup_prob(&scn, &out, cli.threads)?,
        Command::Cascade => cascade(&scn, &out)?,
        Command::Check { .. } => unreachable!("handled above"),
    };
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        mode: cli.command.mode(),
        config_sha256: &scn.config_sha256,
        seeds: Seeds {
            common: scn.sim.seed_common,
            idio: scn.sim.seed_idio,
        },
        config: &scn,
        result: &result.value,
    };
    write_json(&out.join("summary.json"), &summary)?;
    match result.failure {
        Some(f) => Err(f),
        None => Ok(out),
    }
}

#[derive(Serialize)]
struct Seeds {
    common: u64,
    idio: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    mode: Mode,
    config_sha256: &'a str,
    seeds: Seeds,
    config: &'a Scenario,
    result: &'a Value,
}

/// Mode result for `summary.json`, plus a failure to report after the
/// summary has been written.
struct ModeResult {
    value: Value,
    failure: Option<Failure>,
}

impl From<Value> for ModeResult {
    fn from(value: Value) -> Self {
        Self { value, failure: None }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Runtime(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)?;
    Ok(())
}

fn simulate(scn: &Scenario, out: &Path) -> Result<ModeResult, Failure> {
    let traj = run(&scn.profile, &scn.params, &scn.sim)?;
    let mut w = create(&out.join("trajectory.csv"))?;
    write_trajectory_csv(&traj, &mut w)?;
    w.flush()?;
    write_json(&out.join("trajectory.json"), &traj)?;

    let snap_dir = out.join("snapshots");
    fs::create_dir_all(&snap_dir)?;
    let mut snapshots = Vec::new();
    for (i, snap) in traj.snapshots.iter().enumerate() {
        let name = format!("snapshot_{i:03}.csv");
        let mut w = create(&snap_dir.join(&name))?;
        write_snapshot_csv(snap, &mut w)?;
        w.flush()?;
        snapshots.push(json!({ "time": snap.time, "file": format!("snapshots/{name}") }));
    }

    write_text(&out.join("front.svg"), &front_chart("Freezing front", &traj.times, &traj.fronts))?;
    if let Some(svg) = density_chart(&traj) {
        write_text(&out.join("density.svg"), &svg)?;
    }

    let jumps: Vec<Value> = traj
        .macroscopic_jumps()
        .map(|j| json!({ "time": j.time, "size": j.size, "count": j.count, "initial": j.initial }))
        .collect();
    let last = traj.len() - 1;
    println!(
        "final front {} at t = {}; {} macroscopic jump(s)",
        traj.final_front(),
        traj.times[last],
        jumps.len()
    );
    Ok(json!({
        "final_time": traj.times[last],
        "final_front": traj.final_front(),
        "final_loss": traj.loss(last),
        "alive": traj.alive[last],
        "jump_threshold": traj.jump_threshold,
        "blowup": !jumps.is_empty(),
        "first_jump_time": traj.first_jump_time(),
        "max_increment": traj.max_increment(),
        "no_jump_horizon": traj.reduced.no_jump_horizon(),
        "jumps": jumps,
        "snapshots": snapshots,
    })
    .into())
}

fn picard(scn: &Scenario, out: &Path, threads: usize) -> Result<ModeResult, Failure> {
    let steps = scn.sim.steps();
    let noise = NoisePath::generate(scn.sim.seed_common, scn.sim.dt, steps);
    let p = &scn.picard;
    let map = GammaMap::new(
        &scn.profile,
        &scn.params,
        &noise,
        steps,
        p.m_samples,
        p.seed,
        scn.sim.bridge,
        threads,
    )?;
    let outcome = iterate_to_fixed_point(&map, p.max_iterations, p.tol);
    let mut w = create(&out.join("front.csv"))?;
    write_front_csv(&outcome.front, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join("residuals.csv"))?;
    write_residuals_csv(&outcome, &mut w)?;
    w.flush()?;
    let times: Vec<f64> = (0..outcome.front.values.len()).map(|k| k as f64 * outcome.front.dt).collect();
    write_text(
        &out.join("front.svg"),
        &front_chart("Picard fixed point", &times, &outcome.front.values),
    )?;

    let alpha = scn.params.reduce(scn.profile.total_mass()).alpha;
    let threshold = scn.sim.threshold(alpha);
    let jumps = outcome.front.jumps(threshold);
    let monotone = outcome
        .ordering
        .iter()
        .all(|o| matches!(o, IterateOrdering::Increasing | IterateOrdering::Equal));
    let final_front = *outcome.front.values.last().unwrap_or(&outcome.front.s0);
    println!(
        "{} after {} iterations; final front {final_front}",
        if outcome.converged { "converged" } else { "not converged" },
        outcome.iterations()
    );
    let value = json!({
        "converged": outcome.converged,
        "iterations": outcome.iterations(),
        "final_residual": outcome.residual_history.last(),
        "monotone_iterates": monotone,
        "final_front": final_front,
        "jump_threshold": threshold,
        "blowup": !jumps.is_empty(),
        "jumps": jumps.iter().map(|&(k, size)| json!({ "time": k as f64 * outcome.front.dt, "size": size })).collect::<Vec<_>>(),
    });
    let failure = (!outcome.converged).then(|| {
        Failure::Runtime(format!(
            "Picard iteration did not reach tolerance {} within {} iterations",
            p.tol, p.max_iterations
        ))
    });
    Ok(ModeResult { value, failure })
}

fn blowup_prob(scn: &Scenario, out: &Path, threads: usize) -> Result<ModeResult, Failure> {
    let est = monte_carlo_blowup(&scn.profile, &scn.params, &scn.sim, scn.replicas, None, threads)?;
    let report = threshold_regime_check(&scn.profile, &scn.params, &est);
    let mut w = create(&out.join("replicas.csv"))?;
    writeln!(w, "replica,seed_common,seed_idio,first_jump_time,max_increment,final_front")?;
    for r in &est.replicas {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.index,
            r.seed_common,
            r.seed_idio,
            r.first_jump_time.map(stefan_core::io::fmt_f64).unwrap_or_default(),
            stefan_core::io::fmt_f64(r.max_increment),
            stefan_core::io::fmt_f64(r.final_front),
        )?;
    }
    w.flush()?;
    let p = &est.proportion;
    println!(
        "{} of {} replicas jumped; estimate {:.4}, 95% Wilson interval [{:.4}, {:.4}]",
        p.successes, p.trials, p.estimate, p.lower, p.upper
    );
    Ok(json!({
        "jump_cutoff": est.jump_cutoff,
        "replicas": p.trials,
        "jumped": p.successes,
        "estimate": p.estimate,
        "wilson_lower": p.lower,
        "wilson_upper": p.upper,
        "jump_free_fraction": est.jump_free_fraction(),
        "blowup": p.successes > 0,
        "regime": report,
    })
    .into())
}

fn cascade(scn: &Scenario, out: &Path) -> Result<ModeResult, Failure> {
    let lk = scn.params.lambda_kappa();
    let mass = ProfileMass::at_origin(&scn.profile);
    let c = &scn.cascade;
    let runs = c
        .epsilons
        .iter()
        .map(|&e| cascade_epsilon(&mass, e, lk, c.tol, c.max_iterations))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = create(&out.join("cascade.csv"))?;
    write_cascade_csv(&runs, &mut w)?;
    w.flush()?;
    let jump = scn.profile.initial_physical_jump(lk);
    let limit = cascade_limit(&mass, lk, &c.epsilons, c.tol, c.agreement_tol)?;
    println!("{jump}");
    Ok(json!({
        "physical_jump": jump,
        "cascade_limit": limit,
        "blowup": jump > 0.0,
        "runs": runs.iter().map(|r| json!({
            "epsilon": r.epsilon,
            "offset": r.offset,
            "iterations": r.trace.len().saturating_sub(1),
        })).collect::<Vec<_>>(),
    })
    .into())
}

#[derive(Serialize)]
struct Report<'a> {
    schema_version: u32,
    passed: bool,
    checks: &'a DiagnosticsReport,
}

fn check(path: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let traj: Trajectory = serde_json::from_str(&text)
        .map_err(|e| Failure::Runtime(format!("{} is not a saved trajectory: {e}", path.display())))?;
    let report = DiagnosticsReport::evaluate(&traj);
    let passed = report.passed();
    write_json(
        &out.join("report.json"),
        &Report {
            schema_version: SCHEMA_VERSION,
            passed,
            checks: &report,
        },
    )?;
    for c in &report.checks {
        let verdict = match (c.pass, c.hard) {
            (_, false) => "INFO",
            (true, true) => "PASS",
            (false, true) => "FAIL",
        };
        println!(
            "{verdict}  {:<28} value {:.6e}  tolerance {:.6e}{}",
            c.name,
            c.value,
            c.tolerance,
            if c.detail.is_empty() { String::new() } else { format!("  ({})", c.detail) }
        );
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| c.hard && !c.pass)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::CheckFailed(format!("failed checks: {}", failed.join(", "))))
    }
}

fn front_chart(title: &str, times: &[f64], fronts: &[f64]) -> String {
    line_chart(
        title,
        "t",
        "s(t)",
        &[Series {
            label: "front",
            points: times.iter().copied().zip(fronts.iter().copied()).collect(),
            dashed: false,
        }],
    )
}

/// Normalized density at the last snapshot with `t > 0`, against its bound.
fn density_chart(traj: &Trajectory) -> Option<String> {
    let snap = traj.snapshots.iter().rev().find(|s| s.time > 0.0)?;
    let d = density_bound_check(traj, snap.time).ok()?;
    let norm = if snap.total_mass > 0.0 { snap.total_mass } else { 1.0 };
    let mut steps = Vec::with_capacity(2 * snap.density.len());
    for (j, v) in snap.density.iter().enumerate() {
        steps.push((snap.bin_edges[j], v / norm));
        steps.push((snap.bin_edges[j + 1], v / norm));
    }
    let (x0, x1) = (snap.bin_edges[0], *snap.bin_edges.last()?);
    let title = format!("Density of alive particles at t = {}", snap.time);
    Some(line_chart(
        &title,
        "x",
        "density / A",
        &[
            Series {
                label: "histogram",
                points: steps,
                dashed: false,
            },
            Series {
                label: "L-infinity bound",
                points: vec![(x0, d.bound), (x1, d.bound)],
                dashed: true,
            },
        ],
    ))
}
