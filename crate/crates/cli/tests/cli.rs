use std::f64::consts::PI;
use std::process::{Command, Output};

use serde_json::Value;

fn aacord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aacord")).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn catalog_lists_builtins() {
    let out = aacord(&["catalog"]);
    assert!(out.status.success());
    let names: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(
        names,
        ["harmonic1d", "free1d", "oscillator2d", "pendulum-libration", "e2-noncommutative", "so3-momentum"]
    );
    let src = aacord(&["catalog", "harmonic1d"]);
    assert!(String::from_utf8(src.stdout).unwrap().contains("(p1^2 + q1^2)/2"));
}

#[test]
fn topology_of_harmonic_oscillator() {
    let out = aacord(&["topology", "harmonic1d"]);
    assert!(out.status.success());
    let doc = json_of(&out);
    assert_eq!(doc["schema"], 1);
    assert_eq!(doc["seed"], 42);
    assert_eq!(doc["summary"]["rank"], 1);
    let period = doc["lattice"]["basis"][0][0].as_f64().unwrap();
    assert!((period - 2.0 * PI).abs() < 1e-8);
}

#[test]
fn topology_at_a_given_point() {
    let out = aacord(&["topology", "harmonic1d", "--point", "-2,0"]);
    assert!(out.status.success());
    let doc = json_of(&out);
    assert_eq!(doc["point"], serde_json::json!([-2.0, 0.0]));
    assert!((doc["lattice"]["basis"][0][0].as_f64().unwrap() - 2.0 * PI).abs() < 1e-8);
}

#[test]
fn validate_e2_reports_noncommutative_rank_one() {
    let out = aacord(&["validate", "e2-noncommutative"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json_of(&out);
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["summary"]["m"], 1);
    assert_eq!(doc["summary"]["abelian"], false);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = aacord(&["validate", "so3-momentum", "--seed", "7"]);
    let b = aacord(&["validate", "so3-momentum", "--seed", "7"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json_of(&a)["seed"], 7);
}

#[test]
fn verify_oscillator_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = aacord(&["verify", "oscillator2d", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(doc["passed"], true);
    let max_block = doc["summary"]["max_block_residual"].as_f64().unwrap();
    assert!(max_block < 1e-5);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn verify_fails_with_nonzero_exit_under_impossible_tolerance() {
    let out = aacord(&["verify", "harmonic1d", "--tol-blocks", "1e-30"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("block_I_y failed"));
}

#[test]
fn chart_writes_metadata_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = aacord(&["chart", "harmonic1d", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("chart.json")).unwrap()).unwrap();
    assert_eq!(doc["chart"]["rank"], 1);
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("J1,I1,u1_1"));
    // the action of the oscillator equals its energy
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[0] - v[1]).abs() < 1e-7, "{line}");
    }
}

#[test]
fn trace_columns_and_angle_rate() {
    let out = aacord(&["trace", "harmonic1d", "--t-max", "2", "--dt", "0.5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,q1,p1,I1,phi1"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!((r[4] - r[0]).abs() < 1e-8, "{r:?}");
    }
}

#[test]
fn trace_header_for_noncommutative_system() {
    let out = aacord(&["trace", "e2-noncommutative", "--t-max", "0.5", "--dt", "0.25"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("t,q1,q2,p1,p2,I1,x1,x2,t1"));
}

#[test]
fn spec_with_k_equal_2n_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[system]\nname = \"bad\"\nn = 1\n[integrals]\nA = \"q1\"\nB = \"p1\"\n[reference]\npoint = [0.0, 1.0]\n")
        .unwrap();
    let out = aacord(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k must satisfy n <= k < 2n"));
}

#[test]
fn unknown_identifier_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[system]\nname = \"bad\"\nn = 1\n[integrals]\nH = \"p1^2 + zeta\"\n[reference]\npoint = [0.0, 1.0]\n")
        .unwrap();
    let out = aacord(&["validate", path.to_str().unwrap()]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`zeta`") && err.contains("line 5"), "{err}");
}

#[test]
fn custom_hamiltonian_in_integral_names() {
    let out = aacord(&["verify", "oscillator2d", "--hamiltonian", "H1 + 3*H2", "--t-max", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json_of(&out);
    let slopes = &doc["summary"]["slopes"];
    assert!((slopes[0].as_f64().unwrap() - 1.0).abs() < 1e-4);
    assert!((slopes[1].as_f64().unwrap() - 6.0).abs() < 1e-3);
}
