use std::fs;
use std::process::{Command, Output};

fn agectl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agectl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        r#"
name = "cli"
repetitions = 2
protocols = ["acp+", "constant:20"]
duration = 2.0
sweep = { axis = "sources", values = [1, 2] }
[[station]]
service = { kind = "deterministic", rate = 1e6 }
"#,
    )
    .unwrap();
    let out = dir.path().join("runs");
    let o = agectl(&["simulate", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("8 runs written"));
    assert!(out.join("constant_sources2_rep1/manifest.toml").is_file());

    let o = agectl(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("acpplus_sources2_rep")).count(), 4 + 2);
    assert_eq!(text.matches("Jain fairness").count(), 4);
    assert!(out.join("report/runs.csv").is_file());
}

#[test]
fn simulate_rejects_a_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "name = \"x\"\nrepetitions = 0\n").unwrap();
    let o = agectl(&["simulate", spec.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn report_on_an_empty_directory_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!agectl(&["report", dir.path().to_str().unwrap()]).status.success());
}

#[test]
fn sweep_min_age_prints_one_row_per_rate() {
    let o = agectl(&[
        "sweep-min-age",
        "--service-rate",
        "8376000",
        "--rates",
        "200,400,600",
        "--duration",
        "20",
        "--seed",
        "3",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rate,avg_age_ms,occupancy");
    assert_eq!(lines.len(), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("best rate"));
}

#[test]
fn rtt_curve_writes_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let o = agectl(&[
        "rtt-curve",
        "--service",
        "deterministic",
        "--service-rate",
        "1e6",
        "--rtt-base-ms",
        "10",
        "--loads",
        "10,50",
        "--packets",
        "2000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("load,utilisation,mean_rtt_ms"));
}

#[test]
fn zero_length_source_run_writes_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = agectl(&[
        "source",
        "--peer",
        "127.0.0.1:9",
        "--duration",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 1);
}

#[test]
fn unknown_source_mode_is_a_usage_error() {
    let o = agectl(&["source", "--peer", "127.0.0.1:9", "--duration", "1", "--mode", "tcp"]);
    assert_eq!(o.status.code(), Some(2));
}
