use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otdp::io::GridFieldFile;

fn otdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otdp")).args(args).output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn missing_config_exits_with_one_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = otdp(&["solve", "no/such/problem.toml", "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/problem.toml"));
}

#[test]
fn malformed_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\nepsilon = -1\n").unwrap();
    let o = otdp(&["solve", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn double_well_solve_matches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    // Directory-less name resolution: `configs/double_well_1d` → `.toml`.
    let o = otdp(&["solve", &config("double_well_1d"), "--grid", "201", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rho = GridFieldFile::read(&dir.path().join("rho_inf.csv")).unwrap();
    let g = rho.grid().unwrap();
    let exact: Vec<f64> = g.nodes().map(|x| ((x[0] * x[0] - x[0].powi(4)) / 4.0).exp()).collect();
    let w = g.weights();
    let z: f64 = exact.iter().zip(w).map(|(r, w)| r * w).sum();
    let l1: f64 = rho
        .values
        .iter()
        .zip(&exact)
        .zip(w)
        .map(|((a, b), w)| (a - b / z).abs() * w)
        .sum();
    assert!(l1 <= 0.02, "L1 error {l1}");
    for name in ["mu_inf.csv", "v_inf.csv", "trace.csv", "energy.csv", "manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let v = GridFieldFile::read(&dir.path().join("v_inf.csv")).unwrap();
    assert_eq!(v.fields, vec!["v", "v_centered"]);
    let centered = v.field(1);
    let mean: f64 = centered.iter().zip(&rho.values).zip(w).map(|((c, r), w)| c * r * w).sum();
    assert!(mean.abs() < 1e-9, "centered values have mean {mean}");
}

#[test]
fn solve_is_idempotent_and_manifest_checksums_match() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = otdp(&["solve", "builtin:lqg_1d", "--grid", "61", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.len() >= 5);
    for entry in outputs {
        let name = entry["file"].as_str().unwrap();
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs between runs");
        assert_eq!(entry["bytes"].as_u64().unwrap() as usize, x.len());
    }
    assert_eq!(manifest["parameters"]["tol"], 1e-6);
    assert!(manifest["timings_ms"]["dp"].as_f64().is_some());
}

#[test]
fn finite_mode_writes_the_first_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = otdp(&["solve", "builtin:lqg_1d", "--grid", "41", "--mode", "finite", "--steps", "20", "--out", &out]);
    assert_eq!(code(&o), 0);
    let mu = GridFieldFile::read(&dir.path().join("mu_0.csv")).unwrap();
    assert_eq!(mu.fields, vec!["mu1"]);
    assert_eq!(mu.values.len(), 41);
}

#[test]
fn simulate_is_seed_deterministic_and_checks_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(code(&otdp(&["solve", "builtin:lqg_1d", "--grid", "51", "--out", &out])), 0);
    let fb = dir.path().join("mu_inf.csv").display().to_string();
    let sim = |seed: &str, to: &str| {
        otdp(&["simulate", "builtin:lqg_1d", "--feedback", &fb, "--traj", "4", "--T", "20", "--dt", "0.01", "--seed", seed, "--out", to])
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&sim("5", a.path().to_str().unwrap())), 0);
    assert_eq!(code(&sim("5", b.path().to_str().unwrap())), 0);
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("sim_summary.json")).unwrap();
    assert_eq!(read(&a), read(&b));

    let o = otdp(&["simulate", "builtin:double_well_1d", "--feedback", &fb, "--out", &out]);
    assert_eq!(code(&o), 3);
}

#[test]
fn deterministic_paths_have_eight_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(code(&otdp(&["solve", "builtin:case_study_2d", "--grid", "15", "--tol", "1e-4", "--energy-steps", "0", "--out", &out])), 0);
    let fb = dir.path().join("mu_inf.csv").display().to_string();
    let o = otdp(&["simulate", "builtin:case_study_2d", "--feedback", &fb, "--deterministic", "--T", "10", "--out", &out]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("deterministic_paths.csv")).unwrap();
    let mut ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    ids.dedup();
    assert_eq!(ids.len(), 8);
    assert!(text.lines().next().unwrap() == "trajectory,t,x1,x2");
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let run = |args: &[&str]| {
        let mut v = vec!["verify"];
        v.extend_from_slice(args);
        v.extend_from_slice(&["--out", &out]);
        code(&otdp(&v))
    };
    assert_eq!(run(&[&config("double_well_1d.toml"), "--check", "bakry-emery"]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify_bakry_emery.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["gamma"], 0.05);
    assert_eq!(run(&["builtin:double_well_1d", "--check", "bakry-emery", "--lambda", "1"]), 4);
    assert_eq!(run(&["builtin:lqg_1d", "--check", "bakry-emery"]), 1);
    assert_eq!(run(&["builtin:cubic_uncontrolled_1d", "--check", "hasminskii"]), 0);
    assert_eq!(run(&["builtin:cubic_uncontrolled_1d", "--check", "hasminskii", "--gammas", "1,1,0.2,0.25"]), 4);
    assert_eq!(run(&["builtin:case_study_2d", "--grid", "20", "--check", "conservation"]), 0);
    assert_eq!(run(&["builtin:double_well_1d", "--check", "duality"]), 0);
    assert_eq!(run(&["builtin:cubic_uncontrolled_1d", "--check", "hasminskii", "--gammas", "1,1"]), 1);
    assert_eq!(run(&["builtin:lqg_1d", "--check", "nonsense"]), 1);
}
