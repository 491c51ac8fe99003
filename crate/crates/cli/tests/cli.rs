use std::path::Path;
use std::process::{Command, Output};

fn foresight(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foresight"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn solve_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(
        dir.path(),
        "crosswalk.json",
        r#"{"scenario": {"kind": "crosswalk"}, "gamma0": [0.5, 0.9]}"#,
    );
    let o = foresight(dir.path(), &["solve", &sc, "--observe", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "trajectory.csv",
        "trace.csv",
        "solution.json",
        "observations.csv",
        "observations.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(json(&dir.path().join("solution.json"))["converged"], true);

    let obs = dir.path().join("observations.csv");
    let o = foresight(dir.path(), &["infer", &sc, obs.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("result.json"));
    let gamma: Vec<f64> = serde_json::from_value(r["gamma"].clone()).unwrap();
    assert!(
        (gamma[0] - 0.7).abs() <= 1e-2 && (gamma[1] - 0.8).abs() <= 1e-2,
        "{gamma:?}"
    );
    let log = std::fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
    assert_eq!(
        log.lines().count(),
        1 + r["iterations"].as_u64().unwrap() as usize
    );

    let one = tempfile::tempdir().unwrap();
    let o = foresight(
        one.path(),
        &[
            "infer",
            &sc,
            obs.to_str().unwrap(),
            "--gamma-mode",
            "one",
            "--reg",
            "0",
        ],
    );
    assert!(code(&o) == 0 || code(&o) == 2);
    let r = json(&one.path().join("result.json"));
    assert_eq!(r["gamma"], serde_json::json!([1.0, 1.0]));
}

#[test]
fn bad_input_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(
        code(&foresight(
            dir.path(),
            &["solve", missing.to_str().unwrap()]
        )),
        3
    );
    let broken = write(dir.path(), "broken.json", "{\"scenario\": ");
    assert_eq!(code(&foresight(dir.path(), &["solve", &broken])), 3);
    let unknown = write(
        dir.path(),
        "unknown.json",
        r#"{"scenario": {"kind": "roundabout"}}"#,
    );
    assert_eq!(code(&foresight(dir.path(), &["check-grad", &unknown])), 3);
    let sc = write(
        dir.path(),
        "ok.json",
        r#"{"scenario": {"kind": "crosswalk"}}"#,
    );
    let obs = write(dir.path(), "obs.csv", "t,y_1\n0,abc\n");
    write(
        dir.path(),
        "obs.json",
        r#"{"model": {"kind": "FullState", "indices": [0], "state_dim": 8, "covariance": {"kind": "Isotropic", "sigma2": 0.0}, "weighting": "Identity"}, "seed": 0, "sigma2": 0.0}"#,
    );
    let o = foresight(dir.path(), &["infer", &sc, &obs]);
    assert_eq!(code(&o), 3);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("column y_1"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(code(&foresight(dir.path(), &["rhplan", &sc])), 3);
    assert_eq!(
        code(&foresight(
            dir.path(),
            &["solve", &sc, "--gamma-mode", "sometimes"]
        )),
        3
    );
    assert_eq!(code(&foresight(dir.path(), &["frobnicate"])), 3);
    assert_eq!(code(&foresight(dir.path(), &["--help"])), 0);
}

#[test]
fn nonconvergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(
        dir.path(),
        "tight.json",
        r#"{"scenario": {"kind": "crosswalk"}, "solver": {"max_iterations": 1}}"#,
    );
    let o = foresight(dir.path(), &["solve", &sc]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));
}

#[test]
fn montecarlo_reports_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let exp = write(
        dir.path(),
        "exp.json",
        r#"{"noise_levels": 2, "max_sigma2": 0.01, "trials": 1, "bootstrap_resamples": 100}"#,
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = foresight(out, &["montecarlo", &exp, "--seed", "17"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trials.csv", "summary.csv", "report.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let report = json(&a.join("report.json"));
    assert_eq!(report["master_seed"], 17);
    assert_eq!(report["total_rows"], 4);

    let c = dir.path().join("c");
    let o = foresight(
        &c,
        &["montecarlo", &exp, "--seed", "17", "--gamma-mode", "learn"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(json(&c.join("report.json"))["total_rows"], 2);
}

#[test]
fn rhplan_writes_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(
        dir.path(),
        "drive.json",
        r#"{"scenario": {"kind": "driving"}, "receding": {"total_steps": 6, "plan_horizon": 6}}"#,
    );
    let o = foresight(dir.path(), &["rhplan", &sc, "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("rh_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    let s = json(&dir.path().join("rh_summary.json"));
    assert_eq!(s["seed"], 3);
    assert!(s["min_distance"].as_f64().unwrap() >= s["d_min"].as_f64().unwrap());
}

#[test]
fn check_grad_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(
        dir.path(),
        "grad.json",
        r#"{"scenario": {"kind": "crosswalk"}, "check_grad": {"points": 2}}"#,
    );
    let o = foresight(dir.path(), &["check-grad", &sc, "--seed", "8"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("pass").count(), 2, "{stdout}");
    let table = std::fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}
