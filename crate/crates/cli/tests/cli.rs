use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn stefan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stefan"))
        .args(args)
        .env_remove("STEFAN_OUT")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap()
}

const SMALL: &str = r#"
replicas = 4

[params]
kappa = 0.5
lambda = 1.0
theta = 0.5
s0 = 0.0

[profile]
scale = "lambda_kappa"
pieces = [[0.5, 0.5], [1.0, 2.0]]

[sim]
n_particles = 2000
dt = 2e-3
t_end = 0.4
seed_common = 11
seed_idio = 12
snapshots = [0.2]
weak_moments = true
retain_all_jumps = true

[picard]
m_samples = 2000
seed = 13
"#;

fn write_small(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn simulate_demo_is_subcritical_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = scenario("subcritical.toml");
    for dir in [&a, &b] {
        let out = stefan(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["trajectory.csv", "trajectory.json", "summary.json", "front.svg", "density.svg"] {
        assert!(a.join(f).is_file(), "missing {f}");
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let snaps: Vec<_> = fs::read_dir(a.join("snapshots")).unwrap().collect();
    assert_eq!(snaps.len(), 4);

    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["mode"], "simulate");
    assert_eq!(summary["result"]["blowup"], false);
    assert_eq!(summary["seeds"]["common"], 1);
    assert_eq!(summary["config_sha256"].as_str().unwrap().len(), 64);
    let csv = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,front,loss,alive,jump_flag,jump_size\n"));
    assert_eq!(csv.lines().count(), 502);
}

#[test]
fn check_passes_on_simulate_output_and_fails_on_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let cfg = scenario("subcritical.toml");
    assert!(stefan(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()])
        .status
        .success());
    let traj = sim.join("trajectory.json");
    let report_dir = tmp.path().join("report");
    let out = stefan(&["check", "--trajectory", traj.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report = read_json(&report_dir.join("report.json"));
    assert_eq!(report["passed"], true);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS  energy_balance"));

    let mut value = read_json(&traj);
    let fronts = value["fronts"].as_array_mut().unwrap();
    let last = fronts.len() - 1;
    fronts[last] = Value::from(fronts[last].as_f64().unwrap() + 0.01);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&value).unwrap()).unwrap();
    let out = stefan(&["check", "--trajectory", bad.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "check");
    assert!(err["error"]["messages"][0].as_str().unwrap().contains("energy_balance"));
    assert_eq!(read_json(&report_dir.join("report.json"))["passed"], false);
}

#[test]
fn cascade_prints_the_initial_jump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario("cascade.toml");
    let out = stefan(&["cascade", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success());
    let printed: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((printed - 0.6).abs() <= 1e-12, "{printed}");
    let summary = read_json(&tmp.path().join("summary.json"));
    assert!((summary["result"]["cascade_limit"].as_f64().unwrap() - 0.6).abs() <= 1e-6);
    assert!(tmp.path().join("cascade.csv").is_file());
}

#[test]
fn picard_and_blowup_prob_on_a_small_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small(tmp.path());
    let pic = tmp.path().join("picard");
    let out = stefan(&["picard", "--config", cfg.to_str().unwrap(), "--out", pic.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&pic.join("summary.json"));
    assert_eq!(summary["result"]["converged"], true);
    assert_eq!(summary["result"]["monotone_iterates"], true);
    let front = fs::read_to_string(pic.join("front.csv")).unwrap();
    assert!(front.starts_with("t,front\n"));
    assert_eq!(front.lines().count(), 202);
    assert!(pic.join("residuals.csv").is_file() && pic.join("front.svg").is_file());

    let mc = tmp.path().join("mc");
    let mc2 = tmp.path().join("mc2");
    for (dir, threads) in [(&mc, "1"), (&mc2, "2")] {
        let out = stefan(&[
            "blowup-prob",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let summary = read_json(&mc.join("summary.json"));
    assert_eq!(summary["result"]["replicas"], 4);
    assert_eq!(summary["result"]["regime"]["regime"], "supercritical");
    assert_eq!(
        fs::read(mc.join("replicas.csv")).unwrap(),
        fs::read(mc2.join("replicas.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(mc.join("replicas.csv")).unwrap().lines().count(), 5);
}

#[test]
fn seed_flags_override_the_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small(tmp.path());
    let out_dir = tmp.path().join("o");
    let out = stefan(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed-common",
        "99",
        "--seed-idio",
        "98",
    ]);
    assert!(out.status.success());
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["seeds"]["common"], 99);
    assert_eq!(summary["config"]["sim"]["seed_idio"], 98);
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario("cascade.toml");
    let dir = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_stefan"))
        .args(["cascade", "--config", cfg.to_str().unwrap()])
        .env("STEFAN_OUT", &dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("summary.json").is_file());
}

#[test]
fn config_errors_exit_with_code_one_and_list_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = SMALL.replace("theta = 0.5", "theta = 2.0").replace("dt = 2e-3", "dtt = 2e-3");
    fs::write(&bad, text).unwrap();
    let out = stefan(&["simulate", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    let messages: Vec<&str> = err["error"]["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m.as_str().unwrap())
        .collect();
    assert!(messages.iter().any(|m| m.contains("parabolicity")), "{messages:?}");
    assert!(messages.contains(&"sim.dt: missing required key"), "{messages:?}");
    assert!(messages.contains(&"sim.dtt: unknown key"), "{messages:?}");

    let out = stefan(&["simulate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = stefan(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = stefan(&["check", "--trajectory", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "runtime");
}
