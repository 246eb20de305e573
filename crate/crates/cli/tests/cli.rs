use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hiercore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiercore"))
        .args(args)
        .env_remove("HIERCORE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = hiercore(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {line}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_archive(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--classes", "2", "--seed", "7", "--train", "12", "--test", "6", "-o", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn without_timestamp(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("generated_unix_secs");
    v
}

#[test]
fn synth_build_eval_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, e) = (t.path().join("a"), t.path().join("b"), t.path().join("e"));
    small_archive(&a, &[]);
    ok(&["build", "-a", p(&a), "-o", p(&b)]);
    ok(&["eval", "-a", p(&a), "-b", p(&b), "--scenario", "uu", "-o", p(&e)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(e.join("report.json")).unwrap()).unwrap();
    assert!(report["report"]["mAD"]["image"].is_number());
    assert!(report["report"]["mAD"]["pixel"].is_number());
    assert_eq!(report["provenance"]["run"]["scenario"], "uu");
    assert_eq!(report["provenance"]["flags"]["scenario"], "uu");
    let csv = fs::read_to_string(e.join("report.csv")).unwrap();
    assert!(csv.starts_with("group,level,metric,value"));

    let s = t.path().join("s");
    ok(&["score", "-a", p(&a), "-b", p(&b), "-o", p(&s), "--maps"]);
    let lines = fs::read_to_string(s.join("scores.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
    assert_eq!(fs::read_dir(s.join("maps")).unwrap().count(), 12);

    let c = t.path().join("c");
    ok(&["cluster", "-a", p(&a), "-o", p(&c)]);
    assert!(c.join("cluster_model.json").is_file());

    let csv = t.path().join("emb.csv");
    ok(&["export", "-a", p(&a), "-b", p(&b), "-o", p(&csv)]);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 36);

    let bench = t.path().join("bench");
    ok(&["bench", "-a", p(&a), "-o", p(&bench), "--ratio", "0.25"]);
    assert_eq!(fs::read_to_string(bench.join("bench.csv")).unwrap().lines().count(), 3);
}

#[test]
fn zero_ratio_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    small_archive(&a, &[]);
    let out = hiercore(&["build", "-a", p(&a), "-o", p(&t.path().join("b")), "--ratio", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["error"]["kind"], "usage");
    assert!(err["error"]["message"].as_str().unwrap().contains("ratio"));
}

#[test]
fn known_scenario_on_unlabeled_archive() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    small_archive(&a, &[]);
    // Strip class labels from the manifest.
    let manifest = a.join("manifest.json");
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    for r in m["records"].as_array_mut().unwrap() {
        r["class_label"] = Value::Null;
    }
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let out = hiercore(&["eval", "-a", p(&a), "--scenario", "kk", "-o", p(&t.path().join("e"))]);
    assert_eq!(out.status.code(), Some(3));
    let msg = error_line(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("kk"), "{msg}");
    ok(&["eval", "-a", p(&a), "--scenario", "uu", "-o", p(&t.path().join("e"))]);
}

#[test]
fn reports_are_reproducible_and_thread_independent() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    small_archive(&a, &[]);
    let mut reports = Vec::new();
    for (name, threads) in [("r1", "4"), ("r2", "4"), ("r3", "1")] {
        let out = t.path().join(name);
        ok(&["--threads", threads, "eval", "-a", p(&a), "--scenario", "uk", "-o", p(&out)]);
        reports.push(out);
    }
    let strip_out = |mut v: Value| {
        let prov = &mut v["provenance"];
        prov["run"]["out"] = Value::Null;
        prov["flags"]["out"] = Value::Null;
        prov["run"]["threads"] = Value::Null;
        v
    };
    let r: Vec<Value> = reports.iter().map(|d| strip_out(without_timestamp(&d.join("report.json")))).collect();
    assert_eq!(r[0], r[1]);
    assert_eq!(r[0]["report"], r[2]["report"]);
    assert_eq!(
        fs::read(reports[0].join("report.csv")).unwrap(),
        fs::read(reports[2].join("report.csv")).unwrap()
    );
}

#[test]
fn identical_commands_give_identical_bytes_apart_from_timestamp() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    small_archive(&a, &[]);
    let e = t.path().join("e");
    ok(&["eval", "-a", p(&a), "--scenario", "uk", "-o", p(&e)]);
    let first = fs::read_to_string(e.join("report.json")).unwrap();
    ok(&["eval", "-a", p(&a), "--scenario", "uk", "-o", p(&e)]);
    let second = fs::read_to_string(e.join("report.json")).unwrap();
    let differing: Vec<(&str, &str)> = first
        .lines()
        .zip(second.lines())
        .filter(|(x, y)| x != y)
        .collect();
    assert!(differing.iter().all(|(x, _)| x.contains("generated_unix_secs")), "{differing:?}");
}

#[test]
fn config_file_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    small_archive(&a, &[]);
    let cfg = t.path().join("cfg.json");
    let e = t.path().join("e");
    fs::write(
        &cfg,
        serde_json::json!({"archive": a, "out": e, "ratio": 0.5, "scenario": "uk"}).to_string(),
    )
    .unwrap();
    ok(&["--config", p(&cfg), "eval"]);
    let r = without_timestamp(&e.join("report.json"));
    assert_eq!(r["provenance"]["run"]["ratio"], 0.5);
    assert_eq!(r["provenance"]["run"]["scenario"], "uk");
    ok(&["--config", p(&cfg), "eval", "--ratio", "0.25", "--scenario", "uu"]);
    let r = without_timestamp(&e.join("report.json"));
    assert_eq!(r["provenance"]["run"]["ratio"], 0.25);
    assert_eq!(r["provenance"]["run"]["scenario"], "uu");

    fs::write(&cfg, r#"{"ratio": 0.5, "bogus": 1}"#).unwrap();
    let out = hiercore(&["--config", p(&cfg), "eval", "-a", p(&a), "-o", p(&e)]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn env_var_supplies_output_dir() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("env_out");
    let out = Command::new(env!("CARGO_BIN_EXE_hiercore"))
        .args(["synth", "--train", "4", "--test", "2"])
        .env("HIERCORE_OUT", &a)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(a.join("manifest.json").is_file());
    let out = hiercore(&["synth", "--train", "4", "--test", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_inputs_fail_cleanly() {
    let t = tempfile::tempdir().unwrap();
    let missing = hiercore(&["build", "-a", p(&t.path().join("nope")), "-o", p(t.path())]);
    assert_eq!(missing.status.code(), Some(4));
    assert_eq!(error_line(&missing)["error"]["kind"], "io");

    let a = t.path().join("a");
    small_archive(&a, &[]);
    fs::write(a.join("manifest.json"), "{ not json").unwrap();
    let bad = hiercore(&["build", "-a", p(&a), "-o", p(&t.path().join("b"))]);
    assert_eq!(bad.status.code(), Some(3));

    let unknown = hiercore(&["build", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(2));
}
