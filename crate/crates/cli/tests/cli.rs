use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stratatrack"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
}

fn generate(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["generate", "--p", "40", "--n", "30", "--s", "4", "--seed", "3", "--out", out];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["reproduce", "--figure", "3", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--s", "200", "--p", "100", "--out", "/tmp/x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let data = dir.path().join("dataset.csv");
    let o = run(&["solve", "--in", data.to_str().unwrap(), "--lambda", "0.1", "--method", "newton"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["solve", "--in", "/nonexistent.csv", "--lambda", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_solve_certificate_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, &[]);
    assert!(d.join("dataset.csv").exists());

    let run_dir = d.join("run");
    let o = run(&[
        "solve",
        "--in",
        d.join("dataset.csv").to_str().unwrap(),
        "--lambda",
        "0.2",
        "--method",
        "fb",
        "--batches",
        "3000",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(field(&text, "kkt_residual") <= 1e-6, "{text}");
    assert!(run_dir.join("trace.csv").exists());

    let cert = d.join("eta0.json");
    let o = run(&[
        "certificate",
        "--w0",
        d.join("ground_truth.json").to_str().unwrap(),
        "--cov",
        "identity",
        "--out",
        cert.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ic holds"));

    let o = run(&[
        "check",
        "--w0",
        d.join("ground_truth.json").to_str().unwrap(),
        "--eta0",
        cert.to_str().unwrap(),
        "--solution",
        run_dir.join("state.json").to_str().unwrap(),
    ]);
    let text = stdout(&o);
    for key in ["lower", "middle", "upper", "sandwich"] {
        assert!(text.contains(key), "{text}");
    }
    assert_eq!(o.status.code(), Some(if text.contains("sandwich holds") { 0 } else { 1 }));
}

#[test]
fn check_reports_violation_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("w0.json"), "[1.0, 0.0, 0.0]").unwrap();
    std::fs::write(d.join("eta.json"), "[1.0, 0.2, 0.0]").unwrap();
    std::fs::write(d.join("sol.json"), "[1.0, 0.5, 0.0]").unwrap();
    let p = |f: &str| d.join(f).to_str().unwrap().to_string();
    let o = run(&["check", "--w0", &p("w0.json"), "--eta0", &p("eta.json"), "--solution", &p("sol.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("violated"));
}

#[test]
fn binary_datasets_and_covariance_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, &["--format", "binary", "--rho", "0.3"]);
    let o = run(&[
        "solve",
        "--in",
        d.join("dataset.json").to_str().unwrap(),
        "--lambda",
        "0.2",
        "--method",
        "saga",
        "--batches",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("method saga"));

    let rows: Vec<String> = (0..40)
        .map(|i| {
            (0..40)
                .map(|j| 0.3f64.powi((i as i32 - j as i32).abs()).to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    std::fs::write(d.join("cov.csv"), rows.join("\n")).unwrap();
    let o = run(&[
        "certificate",
        "--w0",
        d.join("ground_truth.json").to_str().unwrap(),
        "--cov",
        d.join("cov.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn reproduce_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"regularizer": {"kind": "l1", "p": 20}, "n": 15, "s": 2, "batches": 4, "replications": 3, "delta_targets": [0,1,2,3,4,5,6,7,8,9,10]}"#,
    )
    .unwrap();
    let out = dir.path().join("fig2");
    let o = run(&[
        "reproduce",
        "--figure",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists());
    assert!(out.join("averaged.csv").exists());
}
