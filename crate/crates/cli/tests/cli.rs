use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transduct"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn make_task(dir: &Path) {
    let o = run(
        dir,
        &["--seed", "4", "synth-task", "--dim", "6", "--shots", "4", "--queries", "7", "--out-features", "f.fsf", "--out-labels", "s.csv", "--out-truth", "t.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn fit_then_classify_gives_one_row_per_query() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let o = run(dir.path(), &["fit", "--features", "f.fsf", "--labels", "s.csv", "--out", "m.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &["classify", "--model", "m.json", "--features", "f.fsf", "--labels", "s.csv", "--precision", "identity", "--out", "p.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "query_index,p_0,p_1,p_2,p_3,p_4,argmax");
    assert_eq!(lines.count(), 5 * 7);

    let o = run(dir.path(), &["eval", "--predictions", "p.csv", "--truth", "t.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("metric,value\naccuracy,"));
    assert!(out.contains("\nn_scored,35\n"));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["fit", "--features", "absent.fsf", "--labels", "s.csv", "--out", "m.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.fsf"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["fit", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["classify", "--features", "f.fsf"]).status.code(), Some(1));
    let o = run(dir.path(), &["synth-task", "--covariance", "banded", "--out-features", "a", "--out-labels", "b"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("banded"));
}

#[test]
fn glasso_budget_exhaustion_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    make_task(dir.path());
    let o = run(
        dir.path(),
        &["fit", "--features", "f.fsf", "--labels", "s.csv", "--rho", "0.001", "--max-sweeps", "1", "--kkt-tol", "1e-14", "--out", "m.json"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn config_file_fills_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 4\n[synth-task]\ndim = 6\nshots = 4\nqueries = 7\n").unwrap();
    let o = run(dir.path(), &["--config", "c.toml", "synth-task", "--out-features", "g.fsf", "--out-labels", "g.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    make_task(dir.path());
    assert_eq!(
        std::fs::read(dir.path().join("g.fsf")).unwrap(),
        std::fs::read(dir.path().join("f.fsf")).unwrap()
    );

    // a flag overrides the file
    let o = run(dir.path(), &["--config", "c.toml", "synth-task", "--dim", "3", "--out-features", "h.fsf", "--out-labels", "h.csv"]);
    assert!(o.status.success());
    let bytes = std::fs::read(dir.path().join("h.fsf")).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);

    std::fs::write(dir.path().join("bad.toml"), "[fit]\nrhoo = 1.0\n").unwrap();
    let o = run(dir.path(), &["--config", "bad.toml", "fit"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rhoo"));
}

#[test]
fn bench_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "--seed", "2", "bench", "--source", "tasks", "--reps", "5", "--tuning-tasks", "3", "--dim", "6",
            "--lambda-grid", "0,20", "--methods", "paddle-cov:tuned,simpleshot:un", "--out", out,
        ]
    };
    assert!(run(dir.path(), &args("a.csv")).status.success());
    assert!(run(dir.path(), &args("b.csv")).status.success());
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert!(a.starts_with("method,mean_accuracy,stderr_accuracy,mean_macro_f1,stderr_macro_f1,n_tasks\n"));
    assert_eq!(a.lines().count(), 3);
}
