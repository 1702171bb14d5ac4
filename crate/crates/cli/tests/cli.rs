use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

fn vulrtex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vulrtex")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vulrtex(args);
    assert!(out.status.success(), "vulrtex {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    let mut a = vec!["--json"];
    a.extend_from_slice(args);
    serde_json::from_str(ok(&a).trim()).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Relative path to file bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// prepare-db over the 10-IR family corpus.
fn family_db(db: &Path, extra: &[&str]) -> Value {
    let (rules, sidecars, corpus, va) =
        (fx("synthetic/rules.jsonl"), fx("family/sidecars"), fx("family/corpus.jsonl"), fx("synthetic/va.jsonl"));
    let dbs = s(db);
    let mut args = vec!["--stub-rules", &rules, "--sidecars", &sidecars, "--db", &dbs];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["prepare-db", "--corpus", &corpus, "--va", &va]);
    json(&args)
}

#[test]
fn ten_irs_give_six_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let m = family_db(&dir.path().join("db"), &[]);
    assert_eq!(m["n_historical"], 6);
    assert_eq!(m["n_target"], 4);
    assert_eq!(m["graphs_built"], 6);
    assert_eq!(m["graphs_failed"], 0);
    assert_eq!(m["va_records"], 50);
    assert_eq!(fs::read_dir(dir.path().join("db/graphs")).unwrap().count(), 6);
    // historical IRs are the earliest six
    let ids: Vec<&str> = m["entries"].as_array().unwrap().iter().map(|e| e["ir_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["fam/app#1", "fam/app#2", "fam/app#3", "fam/app#4", "fam/app#5", "fam/app#6"]);
}

#[test]
fn rerun_gives_byte_identical_db() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    family_db(&a, &[]);
    let first = snapshot(&a);
    family_db(&a, &[]);
    family_db(&b, &[]);
    assert_eq!(first, snapshot(&a));
    assert_eq!(first, snapshot(&b));
    assert!(first.contains_key(Path::new("manifest.json")));
}

#[test]
fn missing_va_with_correction_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let db = s(&dir.path().join("db"));
    let out = vulrtex(&["--stub-rules", &fx("synthetic/rules.jsonl"), "--db", &db, "prepare-db", "--corpus", &fx("family/corpus.jsonl")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config") && err.contains("VA"), "{err}");
    // without correction the VA file is optional
    let out = vulrtex(&[
        "--stub-rules",
        &fx("synthetic/rules.jsonl"),
        "--sidecars",
        &fx("family/sidecars"),
        "--no-correction",
        "--db",
        &db,
        "prepare-db",
        "--corpus",
        &fx("family/corpus.jsonl"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (db, out) = (s(&dir.path().join("db")), s(&dir.path().join("out")));
    let text = ok(&["--config", &fx("synthetic/config.toml"), "--db", &db, "run-all", "--out", &out, "--dry-run", "--runs", "20"]);
    assert!(text.starts_with("# config_hash = "), "{text}");
    assert!(text.contains("runs = 20"));
    assert!(text.contains("theta_sim = 0.25"));
    let v = json(&["--config", &fx("synthetic/config.toml"), "--theta-out", "0.6", "--db", &db, "run-all", "--dry-run"]);
    assert_eq!(v["config"]["theta_out"], 0.6);
    assert_eq!(v["config"]["seed"], 7);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

fn run_all(dir: &Path, extra: &[&str]) -> Value {
    let (db, out) = (s(&dir.join("db")), s(&dir.join("out")));
    let config = fx("synthetic/config.toml");
    let mut args = vec!["--config", config.as_str(), "--db", &db, "run-all", "--out", &out];
    args.extend_from_slice(extra);
    json(&args)
}

#[test]
fn run_all_populates_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let v = run_all(dir.path(), &[]);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    for key in ["precision", "recall", "f1", "auroc", "auprc", "macro_p", "macro_r", "macro_f1", "mean_latency"] {
        assert!(report["report"][key].is_f64(), "{key} missing: {}", report["report"]);
    }
    assert_eq!(report["report"]["n_rows"], 8);
    let hash = report["config_hash"].as_str().unwrap().to_string();
    assert_eq!(v["manifest"]["config_hash"], hash.as_str());
    let curve = fs::read_to_string(dir.path().join("out/curve.csv")).unwrap();
    assert!(curve.starts_with(&format!("# config_hash={hash}\ntheta,precision,recall\n")));
    assert_eq!(curve.lines().count(), 2 + 21);
    for line in fs::read_to_string(dir.path().join("out/preds.jsonl")).unwrap().lines() {
        let p: Value = serde_json::from_str(line).unwrap();
        assert_eq!(p["config_hash"], hash.as_str());
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/run_manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = m["timings"].as_array().unwrap().iter().map(|t| t["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["prepare-db", "identify", "evaluate"]);
}

#[test]
fn twenty_runs_are_seed_varied_and_averaged() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path(), &["--runs", "20"]);
    let out = dir.path().join("out");
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 20);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["n_runs"], 20);
    assert_eq!(report["runs"].as_array().unwrap().len(), 20);
    let preds: Vec<Value> =
        fs::read_to_string(out.join("preds.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), 20 * 8);
    let first = preds.iter().find(|p| p["run"] == 0).unwrap();
    let same: Vec<f64> = preds.iter().filter(|p| p["ir_id"] == first["ir_id"]).map(|p| p["p_yes"].as_f64().unwrap()).collect();
    assert_eq!(same.len(), 20);
    assert!(same.iter().any(|&p| p != same[0]), "scores did not vary across runs");
    let mean_f1: f64 = report["runs"].as_array().unwrap().iter().map(|r| r["f1"].as_f64().unwrap()).sum::<f64>() / 20.0;
    assert!((report["report"]["f1"].as_f64().unwrap() - mean_f1).abs() < 1e-12);
}

#[test]
fn database_reuse_with_another_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let db = s(&dir.path().join("db"));
    let config = fx("synthetic/config.toml");
    ok(&["--config", &config, "--db", &db, "prepare-db"]);
    let preds = s(&dir.path().join("p.jsonl"));
    ok(&["--config", &config, "--db", &db, "identify", "--out", &preds]);
    let out = vulrtex(&["--config", &config, "--db", &db, "--seed", "8", "identify", "--out", &preds]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("database was built with config"));
    // theta_out is not part of the database key
    ok(&["--config", &config, "--db", &db, "--theta-out", "0.7", "identify", "--out", &s(&dir.path().join("q.jsonl"))]);
}

#[test]
fn evaluate_rejects_mixed_config_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let db = s(&dir.path().join("db"));
    let config = fx("synthetic/config.toml");
    ok(&["--config", &config, "--db", &db, "prepare-db"]);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["--config", &config, "--db", &db, "identify", "--out", &s(&a)]);
    ok(&["--config", &config, "--db", &db, "--theta-out", "0.7", "identify", "--out", &s(&b)]);
    let mixed = dir.path().join("mixed.jsonl");
    fs::write(&mixed, fs::read_to_string(&a).unwrap() + &fs::read_to_string(&b).unwrap()).unwrap();
    let out = vulrtex(&["--config", &config, "--db", &db, "evaluate", "--preds", &s(&mixed), "--out", &s(&dir.path().join("e"))]);
    assert!(!out.status.success());
    let v = json(&["--config", &config, "--db", &db, "evaluate", "--preds", &s(&a), "--out", &s(&dir.path().join("e"))]);
    assert_eq!(v["report"]["n_rows"], 8);
}

#[test]
fn retrieve_lists_graphs_per_target() {
    let dir = tempfile::tempdir().unwrap();
    let db = s(&dir.path().join("db"));
    let config = fx("synthetic/config.toml");
    ok(&["--config", &config, "--db", &db, "prepare-db"]);
    let v = json(&["--config", &config, "--db", &db, "retrieve"]);
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 8);
    for r in results {
        let sims: Vec<f64> = r["graphs"].as_array().unwrap().iter().map(|g| g["similarity"].as_f64().unwrap()).collect();
        assert!(sims.iter().all(|&x| x > 0.25));
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    }
    assert!(v["graphs_retrieved"].as_u64().unwrap() > 0);
    // theta_sim shapes the stored graphs, so it is part of the database key
    assert!(!vulrtex(&["--config", &config, "--db", &db, "--theta-sim", "1.0", "retrieve"]).status.success());
}

#[test]
fn va_ingest_feeds_prepare_db() {
    let dir = tempfile::tempdir().unwrap();
    let db = s(&dir.path().join("db"));
    let v = json(&["--db", &db, "va", "ingest", &fx("synthetic/va.jsonl")]);
    assert_eq!(v["records"], 50);
    let m = json(&[
        "--stub-rules",
        &fx("synthetic/rules.jsonl"),
        "--sidecars",
        &fx("family/sidecars"),
        "--db",
        &db,
        "prepare-db",
        "--corpus",
        &fx("family/corpus.jsonl"),
    ]);
    assert_eq!(m["va_records"], 50);
}

#[test]
fn failing_stage_is_named_and_earlier_artifacts_kept() {
    let dir = tempfile::tempdir().unwrap();
    // rule table without the classification rules
    let rules: String = fs::read_to_string(fx("synthetic/rules.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("classifying"))
        .map(|l| format!("{l}\n"))
        .collect();
    let rules_path = dir.path().join("rules.jsonl");
    fs::write(&rules_path, rules).unwrap();
    let db = dir.path().join("db");
    let out = vulrtex(&[
        "--config",
        &fx("synthetic/config.toml"),
        "--stub-rules",
        &s(&rules_path),
        "--db",
        &s(&db),
        "run-all",
        "--out",
        &s(&dir.path().join("out")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("identify:"), "{err}");
    assert!(db.join("manifest.json").exists());
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn bad_flag_values_exit_nonzero() {
    assert!(!vulrtex(&["--theta-out", "1.5", "run-all", "--dry-run"]).status.success());
    assert!(!vulrtex(&["--walks", "0", "run-all", "--dry-run"]).status.success());
    assert!(!vulrtex(&["--historical-proportion", "1", "run-all", "--dry-run"]).status.success());
    assert!(vulrtex(&["run-all", "--dry-run"]).status.success());
}

#[test]
fn corpus_build_from_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let pages = dir.path().join("pages");
    fs::create_dir_all(&pages).unwrap();
    let url = "https://github.com/acme/wiki/issues/12";
    let html = r#"<html><h1 class="gh-header-title">Comment field runs scripts</h1>
<div class="comment-body"><p>Posting a comment with a script tag shows an alert.</p>
<img src="https://img.example/alert.png"><pre>&lt;script&gt;alert(1)&lt;/script&gt;</pre></div></html>"#;
    let name = vulrtex_core::pipeline::snapshot_name(url);
    fs::write(pages.join(&name), html).unwrap();
    fs::write(
        pages.join("fetch_log.jsonl"),
        format!("{{\"source_url\":\"{url}\",\"file\":\"{name}\",\"fetched_at\":1700000000,\"ok\":true}}\n"),
    )
    .unwrap();
    let labels = dir.path().join("labels.jsonl");
    fs::write(&labels, "{\"id\":\"acme/wiki#12\",\"label_vul\":true,\"cwe_ids\":[\"CWE-79\"]}\n").unwrap();
    let out = dir.path().join("corpus.jsonl");
    let v = json(&["corpus", "build", "--pages", &s(&pages), "--labels", &s(&labels), "--out", &s(&out)]);
    assert_eq!(v["records"], 1);
    let ir: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(ir["id"], "acme/wiki#12#cwe-79");
    assert_eq!(ir["label_vul"], true);
    assert_eq!(ir["cwe_id"], "CWE-79");
    assert_eq!(ir["Rich-Text"].as_array().unwrap().len(), 2);
}
