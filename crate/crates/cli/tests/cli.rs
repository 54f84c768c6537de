use std::path::Path;
use std::process::{Command, Output};

fn windtrade(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_windtrade")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn error_record(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = windtrade(dir.path(), &["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep-regularization"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = windtrade(dir.path(), &["solve", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"]["class"], "usage");

    let o = windtrade(dir.path(), &["bounds", "--days", "2", "--day", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[picard]\nomega = 1.5\n").unwrap();
    let o = windtrade(dir.path(), &["--config", "bad.toml", "bounds"]);
    assert_eq!(o.status.code(), Some(2));
    let rec = error_record(&o);
    assert_eq!(rec["error"]["class"], "usage");
    assert!(rec["error"]["message"].as_str().unwrap().contains("omega"));
}

#[test]
fn missing_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = windtrade(dir.path(), &["--data", "nowhere", "bounds"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"]["class"], "data");
}

#[test]
fn bounds_prints_the_domain() {
    let dir = tempfile::tempdir().unwrap();
    let o = windtrade(dir.path(), &["bounds", "--days", "1"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["y_min", "y_max", "q_min", "q_max", "psi_min", "psi_max", "idx_gc"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "missing {key}");
    }
}

#[test]
fn solve_then_evaluate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[grid]\nn_x = 6\nn_y = 6\nn_q = 30\nn_m = 8\nn_t = 150\n\n[benchmark]\npaths = 3\npf_n_q = 60\n").unwrap();
    let base = ["--config", "run.toml", "--out", "out", "--days", "1"];
    let o = windtrade(dir.path(), &[&base[..], &["solve"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = windtrade(dir.path(), &[&base[..], &["evaluate", "--snapshot", "out/synthetic-000.snap"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pnl = std::fs::read_to_string(dir.path().join("out/synthetic-000.pnl.csv")).unwrap();
    assert!(pnl.starts_with("day,strategy,path,"));
    assert_eq!(pnl.lines().count(), 1 + 3 * 3);
    assert!(dir.path().join("out/synthetic-000.trajectories.csv").exists());
    assert!(dir.path().join("out/synthetic-000.slices.csv").exists());

    let o = windtrade(dir.path(), &[&base[..], &["evaluate", "--snapshot", "out/missing.snap"]].concat());
    assert_eq!(o.status.code(), Some(3));
}
