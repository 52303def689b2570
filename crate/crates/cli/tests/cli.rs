use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_super-toda"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// One genus-2 mesh with one subdivision, shared by the tests.
fn mesh() -> &'static (TempDir, PathBuf) {
    static M: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    M.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("g2.itri");
        let out = run(&["mesh", "--genus", "2", "--subdivision", "1", "--out", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (dir, path)
    })
}

/// A converged solve at half the first positive eigenvalue.
fn solved() -> &'static (TempDir, PathBuf) {
    static S: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    S.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out_dir = dir.path().join("run");
        let out = run(&[
            "solve",
            "--mesh",
            mesh().1.to_str().unwrap(),
            "--rho",
            "0.5x-lambda1",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (dir, out_dir)
    })
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn mesh_file_round_trips() {
    let text = std::fs::read_to_string(&mesh().1).unwrap();
    let parsed = toda_core::hypmesh::parse_itri(&text).unwrap();
    assert_eq!(toda_core::hypmesh::to_itri(&parsed), text);
    assert!(text.starts_with("ITRI 1\n"));
}

#[test]
fn spectrum_scan_writes_every_class() {
    let dir = TempDir::new().unwrap();
    let out = run(&["spectrum", "--mesh", mesh().1.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let csvs = (0..16).filter(|i| dir.path().join(format!("spectrum_class_{i}.csv")).exists()).count();
    assert_eq!(csvs, 16);
    let table = read_json(&dir.path().join("kernel_table.json"));
    assert_eq!(table.as_array().unwrap().len(), 16);
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["files"].as_object().unwrap().len(), 17);
    let csv = std::fs::read_to_string(dir.path().join("spectrum_class_1.csv")).unwrap();
    assert!(csv.starts_with("index,lambda\n"));
}

#[test]
fn solve_writes_a_verified_mountain_pass_state() {
    let out_dir = &solved().1;
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["outcome"], "converged");
    assert_eq!(report["verdict"], "mountain-pass solution");
    assert!(report["J"].as_f64().unwrap() > 0.0);
    assert!(report["residuals"]["sT_u"].as_f64().unwrap() <= 1e-8);
    assert_eq!(report["efimov_flag"], false);
    let manifest = read_json(&out_dir.join("manifest.json"));
    for name in ["report.json", "iterates.csv", "state.csv", "state.json", "config.json"] {
        let want = toda_cli::io::sha256_hex(&std::fs::read(out_dir.join(name)).unwrap());
        assert_eq!(manifest["files"][name], want.as_str(), "{name}");
    }
}

#[test]
fn solve_is_byte_deterministic() {
    let first = snapshot(&solved().1);
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "solve",
        "--mesh",
        mesh().1.to_str().unwrap(),
        "--rho",
        "0.5x-lambda1",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let second = snapshot(&out_dir);
    // config.json records the output directory, and the manifest hashes it.
    for name in ["report.json", "iterates.csv", "state.csv", "state.json"] {
        assert!(first[name] == second[name], "{name} differs between runs");
    }
}

#[test]
fn verify_accepts_the_solution_and_spots_a_trivial_state() {
    let (_, out_dir) = solved();
    let state = out_dir.join("state.csv");
    let out = run(&["verify", "--mesh", mesh().1.to_str().unwrap(), "--state", state.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mountain-pass solution"));

    // Zero both spinors and u: the result is the trivial solution.
    let dir = TempDir::new().unwrap();
    let text = std::fs::read_to_string(&state).unwrap();
    let mut lines = text.lines();
    let mut tampered = String::from(lines.next().unwrap());
    tampered.push('\n');
    for line in lines {
        let v = line.split(',').next().unwrap();
        tampered.push_str(&format!("{v},0,0,0,0,0,0,0,0,0,0\n"));
    }
    let t_state = dir.path().join("state.csv");
    std::fs::write(&t_state, tampered).unwrap();
    std::fs::copy(out_dir.join("state.json"), dir.path().join("state.json")).unwrap();
    let out = run(&["verify", "--mesh", mesh().1.to_str().unwrap(), "--state", t_state.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("trivial solution"));
    let verdict = read_json(&dir.path().join("verdict.json"));
    assert_eq!(verdict["verdict"], "trivial solution");
}

#[test]
fn verify_rejects_a_different_mesh() {
    let (_, out_dir) = solved();
    let dir = TempDir::new().unwrap();
    let other = dir.path().join("g2k2.itri");
    assert!(run(&["mesh", "--genus", "2", "--subdivision", "2", "--out", other.to_str().unwrap()]).status.success());
    let out = run(&[
        "verify",
        "--mesh",
        other.to_str().unwrap(),
        "--state",
        out_dir.join("state.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"mesh": {"generator": {"genus": 2, "subdivision": 1}}, "rho": 0.05, "output_dir": "o", "solver": {"gamma": 1}}"#,
    )
    .unwrap();
    let out = run(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gamma"), "{err}");
}

#[test]
fn exceptional_rho_is_a_domain_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "solve",
        "--mesh",
        mesh().1.to_str().unwrap(),
        "--rho",
        "1x-lambda1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceptional"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(run(&["solve", "--rho", "0.1"]).status.code(), Some(2));
    assert_eq!(run(&["spectrum", "--mesh", "x", "--spin-class", "many"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_mesh_file_is_a_domain_error() {
    let out = run(&["spectrum", "--mesh", "/nonexistent/m.itri", "--spin-class", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_reports_the_dimension_jump() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sweep.json");
    let out_dir = dir.path().join("sweep");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"mesh": {{"path": "{}"}}, "rho": {{"grid": ["0.5x-lambda1", "1.1x-lambda1"]}},
               "solver": {{"max_deform_steps": 200}}, "output_dir": "{}"}}"#,
            mesh().1.display(),
            out_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("jumps by 4"));
    let rows = read_json(&out_dir.join("sweep.json"));
    assert_eq!(rows[1]["dim_jump"], 4);
    assert!(out_dir.join("rho_000").join("state.csv").exists());
}
