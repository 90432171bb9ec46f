use std::path::Path;
use std::process::{Command, Output};

fn tvarch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvarch"))
        .args(args)
        .output()
        .expect("spawn tvarch")
}

fn simulate(dir: &Path, t_len: usize, seed: u64) -> String {
    let path = dir.join(format!("sim_{t_len}_{seed}.csv"));
    let out = tvarch(&[
        "simulate",
        "--t",
        &t_len.to_string(),
        "--coef",
        "sin:2,1",
        "0.3",
        "0.2",
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_owned()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON on stdout")
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read_to_string(simulate(dir.path(), 300, 5)).unwrap();
    let b = std::fs::read_to_string(simulate(dir.path(), 300, 5)).unwrap();
    let c = std::fs::read_to_string(simulate(dir.path(), 300, 6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 301);
}

#[test]
fn simulate_then_fit_recovers_constant_lags() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate(dir.path(), 3000, 3);
    let out = tvarch(&["fit", "--input", &input, "--p", "2", "--partition", "varying=0 constant=1,2", "--json"]);
    let v = json(&out);
    assert_eq!(v["command"], "fit");
    assert_eq!(v["schema_version"], 1);
    let beta: Vec<f64> = serde_json::from_value(v["result"]["fit"]["beta"].clone()).unwrap();
    assert!((beta[0] - 0.3).abs() < 0.15, "{beta:?}");
    assert!((beta[1] - 0.2).abs() < 0.15, "{beta:?}");
}

#[test]
fn fit_writes_coefficient_paths() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate(dir.path(), 600, 1);
    let paths = dir.path().join("paths.csv");
    let out = tvarch(&["fit", "--input", &input, "--p", "2", "--bandwidth", "0.2", "--path-csv", paths.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(paths).unwrap();
    assert_eq!(text.lines().next().unwrap(), "u,a0,a1,a2");
    assert!(text.lines().count() > 500);
}

#[test]
fn out_flag_redirects_json() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate(dir.path(), 500, 2);
    let target = dir.path().join("report.json");
    let out = tvarch(&[
        "--json",
        "--out",
        target.to_str().unwrap(),
        "test-dynamic",
        "--input",
        &input,
        "--p",
        "2",
        "--bandwidth",
        "0.2",
        "--calibration",
        "asymptotic",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(target).unwrap()).unwrap();
    assert_eq!(v["command"], "test-dynamic");
    let p = v["result"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn bandwidth_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate(dir.path(), 600, 4);
    let curve = dir.path().join("curve.csv");
    let out = tvarch(&["select-bandwidth", "--input", &input, "--p", "1", "--curve-csv", curve.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(curve).unwrap();
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn missing_input_exits_2() {
    let out = tvarch(&["fit", "--input", "/definitely/not/here.csv", "--p", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_numeric_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "r\nabc\n").unwrap();
    let out = tvarch(&["fit", "--input", path.to_str().unwrap(), "--p", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_partition_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = simulate(dir.path(), 200, 1);
    let out = tvarch(&["fit", "--input", &input, "--partition", "varying=0 constant=0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_moment_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spike.csv");
    let mut text = String::from("r\n");
    for i in 0..200 {
        text.push_str(if i == 100 { "5.0\n" } else { "0.0\n" });
    }
    std::fs::write(&path, text).unwrap();
    let out = tvarch(&[
        "test-constancy",
        "--input",
        path.to_str().unwrap(),
        "--p",
        "1",
        "--partition",
        "constant=1",
        "--bandwidth",
        "0.02",
        "--B",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
