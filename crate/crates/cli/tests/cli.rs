use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cdsrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdsrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &TempDir, with_scores: bool) -> (PathBuf, PathBuf) {
    let features = dir.path().join("f.csv");
    let scores = dir.path().join("s.json");
    let mut args = vec![
        "synth", "-o", arg(&features), "--num-ids", "8", "--per-id", "3", "--dim", "16",
        "--noise", "0.1", "--seed", "3",
    ];
    if with_scores {
        args.extend(["--scores", arg(&scores)]);
    }
    let out = cdsrank(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (features, scores)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_features_file_is_an_input_error() {
    let out = cdsrank(&["rerank", "/nonexistent/features.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/features.csv"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_probe_id_is_named() {
    let dir = TempDir::new().unwrap();
    let (features, _) = synth(&dir, false);
    let out = cdsrank(&["cluster", arg(&features), "--probe", "ghost"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ghost"));
}

#[test]
fn cluster_support_stays_in_the_probe_identity() {
    let dir = TempDir::new().unwrap();
    let features = dir.path().join("two.csv");
    let out = cdsrank(&[
        "synth", "-o", arg(&features), "--num-ids", "2", "--per-id", "5", "--dim", "32",
        "--noise", "0.05", "--seed", "4",
    ]);
    assert!(out.status.success());
    let out = cdsrank(&["cluster", arg(&features), "--probe", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report[0]["probe_index"], 5);
    let support: Vec<u64> = report[0]["support"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    // Identity 1 occupies rows 5..10.
    assert!(support.contains(&5));
    assert!(support.iter().all(|i| (5..10).contains(i)), "{support:?}");
}

#[test]
fn wrong_size_scores_are_rejected() {
    let dir = TempDir::new().unwrap();
    let (features, _) = synth(&dir, false);
    let scores = dir.path().join("bad.json");
    std::fs::write(&scores, r#"{"S": [[1.0, 0.5], [0.5, 1.0]], "D": [[0.0, 0.5], [0.5, 0.0]]}"#)
        .unwrap();
    let out = cdsrank(&["rerank", arg(&features), "--scores", arg(&scores)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn expansion_without_k_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (features, _) = synth(&dir, false);
    for args in [
        vec!["rerank", arg(&features), "--expand"],
        vec!["expand", arg(&features)],
    ] {
        let out = cdsrank(&args);
        assert_eq!(out.status.code(), Some(2));
        assert!(stderr(&out).contains("k required for expansion"));
    }
}

#[test]
fn rerank_is_byte_deterministic_and_expand_matches_flag() {
    let dir = TempDir::new().unwrap();
    let (features, scores) = synth(&dir, true);
    let run = |name: &str, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut args = vec!["rerank", arg(&features), "--scores", arg(&scores), "-o", arg(&path)];
        args.extend(extra);
        let out = cdsrank(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read(path).unwrap()
    };
    let first = run("a.jsonl", &[]);
    assert_eq!(first, run("b.jsonl", &[]));
    assert_eq!(first, run("c.jsonl", &["--sequential"]));
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 24);

    let flagged = run("d.jsonl", &["--expand", "--k-expand", "4"]);
    let path = dir.path().join("e.jsonl");
    let out = cdsrank(&[
        "expand", arg(&features), "--scores", arg(&scores), "--k-expand", "4", "-o", arg(&path),
    ]);
    assert!(out.status.success());
    assert_eq!(flagged, std::fs::read(path).unwrap());
}

#[test]
fn eval_reports_metrics_and_perfect_beats_shuffled() {
    let dir = TempDir::new().unwrap();
    let (features, _) = synth(&dir, false);
    let ranking = dir.path().join("r.jsonl");
    assert!(cdsrank(&["rerank", arg(&features), "-o", arg(&ranking)]).status.success());
    let out = cdsrank(&["eval", arg(&ranking), arg(&features), "--max-rank", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["queries"], 24);
    assert_eq!(m["CMC"].as_array().unwrap().len(), 5);
    let map = m["mAP"].as_f64().unwrap();
    assert!(map > 0.9, "{map}");

    // Reverse every order: relevant items sink to the bottom.
    let text = std::fs::read_to_string(&ranking).unwrap();
    let reversed: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["order"].as_array_mut().unwrap().reverse();
            v["scores"].as_array_mut().unwrap().reverse();
            format!("{v}\n")
        })
        .collect();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, reversed).unwrap();
    let out = cdsrank(&["eval", arg(&bad), arg(&features)]);
    let worse: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(worse["mAP"].as_f64().unwrap() < map);
    assert_eq!(out.stdout, cdsrank(&["eval", arg(&bad), arg(&features)]).stdout);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let (features, scores) = synth(&dir, true);
    let out = cdsrank(&[
        "sweep", arg(&features), "--scores", arg(&scores), "--param", "beta", "--range",
        "0.1:0.9:0.1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "beta,mAP");
    assert_eq!(lines.len(), 10);

    let out = cdsrank(&["sweep", arg(&features), "--param", "delta", "--range", "0.3"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, _) = synth(&dir, false);
    let first = std::fs::read(&a).unwrap();
    let (b, _) = synth(&dir, false);
    assert_eq!(first, std::fs::read(b).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let (features, scores) = synth(&dir, true);
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "beta = 0.2\nk_expand = 4\n").unwrap();
    let sweep = |extra: &[&str]| {
        let mut args = vec![
            "sweep", arg(&features), "--scores", arg(&scores), "--param", "delta", "--range", "0.3",
            "--config", arg(&cfg),
        ];
        args.extend(extra);
        cdsrank(&args)
    };
    assert!(sweep(&[]).status.success());
    // The file supplies k_expand, so expansion is accepted without the flag.
    assert!(sweep(&["--expand"]).status.success());
    assert_eq!(sweep(&["--beta", "1.5"]).status.code(), Some(2));
    std::fs::write(&cfg, "beta = 7\n").unwrap();
    assert_eq!(sweep(&[]).status.code(), Some(2));
    assert!(sweep(&["--beta", "0.5"]).status.success());
}

#[test]
fn help_lists_every_config_field() {
    for sub in ["cluster", "rerank", "expand", "sweep"] {
        let out = cdsrank(&[sub, "--help"]);
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in [
            "--alpha-margin", "--tol", "--max-iter", "--theta", "--beta", "--delta",
            "--k-expand", "--metric", "--seed",
        ] {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
        assert!(text.contains("[default: 0.9]") && text.contains("[default: 1e-7]"));
    }
}

#[test]
fn bad_thread_count_is_an_input_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_cdsrank"))
        .args(["eval", "x", "y"])
        .env("CDSRANK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
