use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lent")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn run_ok(args: &[&str]) {
    let out = lent(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const MINIMAL: &str = "seed = 17\nscenario = \"doleans\"\n";

#[test]
fn simulate_writes_trajectory_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("out");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(files(&out), vec!["manifest.json", "trajectory.csv"]);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["seed"], 17);
    assert_eq!(m["command"], "simulate");
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("time,is_jump,X_1,X_2,K_11"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", MINIMAL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    }
    for f in files(&a) {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_step_is_a_config_error_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "seed = 1\n[numerics]\nstep = 0.0\n");
    let out = lent(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn missing_seed_and_unknown_keys_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().join("o");
    let out = lent(&["simulate", "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    let cfg = write(tmp.path(), "c.toml", "seed = 1\n[numerics]\nstpe = 0.1\n");
    let out = lent(&["simulate", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpe"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", MINIMAL);
    let out = tmp.path().join("o");
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", out.to_str().unwrap()]);
    assert_eq!(json(&out.join("manifest.json"))["config"]["seed"], 99);
}

#[test]
fn gamma_cross_checks_the_flow_formulas() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    for formula in ["theorem9", "remark3"] {
        run_ok(&["gamma", "--seed", "5", "--formula", formula, "--out", out.to_str().unwrap()]);
        let g = json(&out.join("gamma.json"));
        assert_eq!(g["gamma"]["formula_tag"], formula);
        assert!(g["cross_check"]["theorem9_vs_remark3"].as_f64().unwrap() <= 1e-10);
        assert_eq!(g["cross_check"]["agree"], true);
        assert!(g["rank"]["rank"].as_u64().is_some());
    }
}

#[test]
fn rho_mc_reports_standard_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "seed = 4\n[numerics]\nformula = \"rho_mc\"\ndraws = 10000\n");
    let out = tmp.path().join("o");
    run_ok(&["gamma", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let g = json(&out.join("gamma.json"));
    assert_eq!(g["gamma"]["standard_errors"].as_array().unwrap().len(), 4);
}

#[test]
fn generic_formula_matches_theorem9() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    run_ok(&["gamma", "--seed", "8", "--formula", "generic", "--out", out.to_str().unwrap()]);
    let g = json(&out.join("gamma.json"));
    assert!(g["cross_check"]["selected_vs_theorem9"].as_f64().unwrap() < 1e-6);
}

#[test]
fn unknown_formula_tag_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let out = lent(&["gamma", "--seed", "1", "--formula", "lemma4", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rank_stats_tables() {
    let tmp = TempDir::new().unwrap();
    let one = write(tmp.path(), "one.toml", "seed = 2\nscenario = \"levy-area-1\"\n[numerics]\nn_paths = 10\nepsilons = [0.1]\n");
    let out = tmp.path().join("one");
    run_ok(&["rank-stats", "--config", one.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("rank_table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let many = write(
        tmp.path(),
        "many.toml",
        "seed = 2\nscenario = \"levy-area-1\"\n[numerics]\nn_paths = 30\nepsilons = [0.8, 0.3, 0.05]\n",
    );
    let out = tmp.path().join("many");
    run_ok(&["rank-stats", "--config", many.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let s = json(&out.join("summary.json"));
    assert_eq!(s["monotone"], true);
    assert_eq!(s["rows"].as_array().unwrap().len(), 3);

    let empty = write(tmp.path(), "empty.toml", "seed = 2\n[numerics]\nepsilons = []\n");
    let out = lent(&["rank-stats", "--config", empty.to_str().unwrap(), "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn examples_run_and_agree_with_closed_forms() {
    let tmp = TempDir::new().unwrap();
    for name in ["doleans", "levy-area-1", "levy-area-2"] {
        let out = tmp.path().join(name);
        run_ok(&["example", name, "--seed", "6", "--out", out.to_str().unwrap()]);
        let g = json(&out.join("gamma.json"));
        assert!(g["relative_distance"].as_f64().unwrap() <= 1e-9, "{name}");
        assert_eq!(files(&out), vec!["gamma.json", "jumps.csv", "manifest.json", "trajectory.csv"]);
    }
    let out = lent(&["example", "levy-area-3", "--seed", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mckean_example_reports_picard_residuals() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "seed = 3\n[mckean]\nparticles = 40\npicard_iters = 3\n");
    let out = tmp.path().join("o");
    run_ok(&["example", "mckean", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let g = json(&out.join("gamma.json"));
    assert_eq!(g["picard_residuals"].as_array().unwrap().len(), 3);
    assert_eq!(g["aa_star_at_start"]["full_rank"], true);
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 41);
}

#[test]
fn stable_like_example_runs_the_generator_check() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "seed = 3\n[stable_like]\nn_paths = 20000\n");
    let out = tmp.path().join("o");
    run_ok(&["example", "stable-like", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let g = json(&out.join("gamma.json"));
    assert_eq!(g["generator_check"]["passed"], true);
    assert!((g["zeta"].as_f64().unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-12);
    let bad = write(tmp.path(), "bad.toml", "seed = 3\n[stable_like]\nband = [1.2, 1.4]\n");
    let out = lent(&["example", "stable-like", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn custom_scenario_from_expressions() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        r#"seed = 3
scenario = "custom"
[model]
epsilon = 0.2
[custom]
state_dim = 2
mark_dim = 1
x0 = [0.2, 1.0]
jump = ["u1 * (1 + 0.3*sin(x2))", "0.2 * u1 * x1"]
drift = ["cos(x2) - 0.5*x1", "-0.3*x1*x2"]
"#,
    );
    let out = tmp.path().join("o");
    run_ok(&["gamma", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let g = json(&out.join("gamma.json"));
    assert!(g["cross_check"]["theorem9_vs_remark3"].as_f64().unwrap() <= 1e-10);
    let broken = write(tmp.path(), "b.toml", "seed = 3\nscenario = \"custom\"\n[custom]\nstate_dim = 1\nmark_dim = 1\nx0 = [0.0]\njump = [\"u1 *\"]\n");
    let out = lent(&["gamma", "--config", broken.to_str().unwrap(), "--out", tmp.path().join("b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("custom.jump[0]"));
}

#[test]
fn shipped_presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = lent_cli::RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
    }
}

#[test]
fn manifest_replays_the_run() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    run_ok(&["gamma", "--seed", "12", "--formula", "remark3", "--out", a.to_str().unwrap()]);
    let manifest = a.join("manifest.json");
    let b = tmp.path().join("b");
    run_ok(&["gamma", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    for f in files(&a) {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f}");
    }
}
