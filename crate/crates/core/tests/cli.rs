use std::path::{Path, PathBuf};

use qbrag::cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use qbrag::eval::EvaluationReport;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .display()
        .to_string()
}

fn qbrag(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qbrag").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn built_kb(root: &Path) -> String {
    let kb = root.join("kb").display().to_string();
    for args in [
        vec!["ingest", "--contents", &fixture("contents.jsonl"), "--kb", &kb],
        vec!["genq", "--kb", &kb],
        vec!["build-matrix", "--kb", &kb],
    ] {
        let (code, out, err) = qbrag(&args);
        assert_eq!(code, EXIT_OK, "{args:?}: {out}{err}");
        assert!(out.starts_with("seed: 0\n"));
    }
    kb
}

#[test]
fn bench_writes_a_row_per_strategy_and_k() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = built_kb(tmp.path());
    let out: PathBuf = tmp.path().join("bench");
    let (code, stdout, stderr) = qbrag(&[
        "bench",
        "--kb",
        &kb,
        "--make-rephrase",
        "6",
        "--strategies",
        "naive,qb_vanilla",
        "--ks",
        "1,3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{stdout}{stderr}");
    let report: EvaluationReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 4);
    for (s, k) in [("naive", 1), ("naive", 3), ("qb_vanilla", 1), ("qb_vanilla", 3)] {
        assert!(report.row(s, k).is_some(), "missing row {s}@{k}");
    }
    assert!(out.join("answers.jsonl").exists());
    assert!(out.join("cases.jsonl").exists());
    assert!(stdout.contains("qb_vanilla"));

    // the written cases can be fed back in and give the same report
    let again = tmp.path().join("again");
    let cases = out.join("cases.jsonl");
    let (code, ..) = qbrag(&[
        "bench",
        "--kb",
        &kb,
        "--testset",
        cases.to_str().unwrap(),
        "--strategies",
        "naive,qb_vanilla",
        "--ks",
        "1,3",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(
        std::fs::read(out.join("report.json")).unwrap(),
        std::fs::read(again.join("report.json")).unwrap()
    );
}

#[test]
fn retrieve_prints_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = built_kb(tmp.path());
    let (code, out, _) = qbrag(&["retrieve", "--kb", &kb, "--k", "3", "How should I store insulin?"]);
    assert_eq!(code, EXIT_OK);
    let json: serde_json::Value = serde_json::from_str(out.lines().nth(1).unwrap()).unwrap();
    let items = json["items"].as_array().unwrap();
    assert_eq!(items.len(), 3);
    let ids: std::collections::BTreeSet<_> = items.iter().map(|i| i["content_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 3);
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = built_kb(tmp.path());
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("bench");
    let (code, _, err) = qbrag(&["bench", "--kb", &kb, "--make-ood", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_RUNTIME, "{err}");
    assert!(err.contains("file"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = built_kb(tmp.path());
    let (code, ..) = qbrag(&["retrieve", "--kb", &kb, "--k", "0", "q"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, err) = qbrag(&["retrieve", "--kb", &kb, "--k", "2", "--strategy", "nope", "q"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("qb_vanilla"));
    let (code, ..) = qbrag(&["bench", "--kb", &kb, "--out", "x"]);
    assert_eq!(code, EXIT_USAGE, "bench without a test set");
    let missing = tmp.path().join("missing").display().to_string();
    let (code, ..) = qbrag(&["genq", "--kb", &missing]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn curate_writes_preferences() {
    let tmp = tempfile::tempdir().unwrap();
    let kb = built_kb(tmp.path());
    let out = tmp.path().join("prefs.jsonl");
    let (code, stdout, _) = qbrag(&["curate", "--kb", &kb, "--out", out.to_str().unwrap(), "--samples", "3"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("preference examples"));
    let lines = std::fs::read_to_string(&out).unwrap();
    assert!(lines.lines().count() > 0);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("preferred").is_some());
    }
}
