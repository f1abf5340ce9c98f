//! Exit codes and artifacts of the command-line driver.

mod common;

use common::{cli, code, write_config};

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&cli(&["frobnicate"])), 2);
    assert_eq!(code(&cli(&["--help"])), 0);
}

#[test]
fn malformed_config_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "no_such_field = 1");
    let run = dir.path().join("run");
    let out = cli(&["synth", "--run", s(&run), "--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn changed_config_on_an_existing_run_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.toml", "");
    let b = write_config(dir.path(), "b.toml", "threshold = 12.0");
    let run = dir.path().join("run");
    assert_eq!(code(&cli(&["synth", "--run", s(&run), "--config", s(&a)])), 0);
    assert_eq!(code(&cli(&["synth", "--run", s(&run), "--config", s(&b)])), 3);
}

#[test]
fn gmad_without_scores_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let run = dir.path().join("run");
    assert_eq!(code(&cli(&["synth", "--run", s(&run), "--config", s(&cfg)])), 0);
    let out = cli(&["gmad", "--run", s(&run), "--round", "1"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.join("rounds").join("1").join("scores.csv").exists());
}

#[test]
fn round_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let run = dir.path().join("run");
    let out = cli(&["ensembles", "--run", s(&run), "--config", s(&cfg), "--round", "0"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn whole_loop_replays_identically_and_reports_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "rounds = 1");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = cli(&["round", "--run", s(&a), "--config", s(&cfg)]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let second = cli(&["round", "--run", s(&b), "--config", s(&cfg)]);
    assert_eq!(first.stdout, second.stdout);
    for f in ["pairs.jsonl", "labels.jsonl", "metrics.json"] {
        let read = |root: &std::path::Path| std::fs::read(root.join("rounds").join("1").join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }

    let summary: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(code(&cli(&["report", "--run", s(&a)])), 0);
    let report = std::fs::read_to_string(a.join("report.md")).unwrap();
    for round in summary.as_array().unwrap() {
        let row = format!("| {} | {:.4} |", round["round"], round["probe_srcc"].as_f64().unwrap());
        assert!(report.contains(&row), "{row} missing from report");
    }
}
