use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth": {"topics": 2, "users": 8, "boards_per_topic": 6, "boards_pos": 3, "boards_neg": 4,
            "images_per_board": 6, "clicked_per_user": 6},
  "dictionary": {"epochs": 3},
  "metric": {"iters": 40},
  "eval": {"baseline_trials": 2000}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collection-forge"))
        .args(args)
        .arg("--config")
        .arg(dir.join("config.json"))
        .arg("--out")
        .arg(dir.join("work"))
        .env_remove("COLLECTION_FORGE_THREADS")
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), config).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_input_exits_with_2() {
    let dir = setup(SMALL);
    let out = run(dir.path(), &["dict-learn", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_seed_is_rejected() {
    let dir = setup(SMALL);
    assert_eq!(run(dir.path(), &["synth"]).status.code(), Some(2));
}

#[test]
fn bad_thread_cap_is_rejected() {
    let dir = setup(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_collection-forge"))
        .args(["synth", "--seed", "1", "--out"])
        .arg(dir.path().join("work"))
        .env("COLLECTION_FORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degenerate_metric_exits_with_3() {
    let cfg = r#"{
      "synth": {"noise_sigma": 0.0, "style_sigma": 0.0, "outlier_rate": 0.0, "users": 8, "topics": 2,
                "boards_pos": 3, "boards_neg": 4, "boards_per_topic": 6, "images_per_board": 4, "clicked_per_user": 4},
      "metric": {"query_dependent": false}
    }"#;
    let dir = setup(cfg);
    ok(dir.path(), &["synth", "--seed", "1"]);
    ok(dir.path(), &["dict-learn"]);
    ok(dir.path(), &["encode", "--variant", "avg-l1"]);
    let out = run(dir.path(), &["metric-train", "--metric", "full"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_artifacts_carry_hash_and_seed() {
    let dir = setup(SMALL);
    let d = dir.path();
    ok(d, &["synth", "--seed", "11"]);
    ok(d, &["dict-learn"]);
    ok(d, &["encode", "--variant", "huber-g"]);
    ok(d, &["metric-train", "--metric", "diag"]);
    let ranked = ok(d, &["rank", "--k", "4"]);
    assert!(ranked.starts_with("rank:"));
    let table = ok(d, &["eval"]);
    assert!(table.contains("MAP@5"));
    assert!(table.contains("All (global)"));

    let work = d.join("work");
    let dataset = json(&work.join("dataset/manifest.json"));
    let hash = dataset["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(dataset["seed"], 11);
    for manifest in ["dictionary/manifest.json", "descriptors/huber-g.json", "metric/huber-g-diag/manifest.json"] {
        let m = json(&work.join(manifest));
        assert_eq!(m["config_hash"], hash.as_str(), "{manifest}");
        assert_eq!(m["seed"], 11, "{manifest}");
    }
    let report = json(&work.join("reports/huber-g-diag-eval.json"));
    assert_eq!(report["config_hash"], hash.as_str());
    assert!(report["map_at_5"].as_f64().unwrap() >= 0.0);

    let csv = fs::read_to_string(fs::read_dir(work.join("reports")).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|e| e == "csv")).unwrap()).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash} seed=11")));
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').nth(1).unwrap().parse::<usize>().unwrap() <= 4));

    // descriptor matrix and sidecar agree
    let bytes = fs::read(work.join("descriptors/huber-g.cfm")).unwrap();
    assert_eq!(&bytes[..4], b"CFM1");
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let sidecar = fs::read_to_string(work.join("descriptors/huber-g.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), rows);
}

#[test]
fn eval_refuses_mixed_variants() {
    let dir = setup(SMALL);
    let d = dir.path();
    ok(d, &["synth", "--seed", "2"]);
    ok(d, &["dict-learn"]);
    ok(d, &["encode", "--variant", "avg-g"]);
    ok(d, &["encode", "--variant", "raw-avg"]);
    ok(d, &["metric-train", "--variant", "avg-g", "--metric", "eucl"]);
    let side = d.join("work/descriptors/avg-g.jsonl");
    let raw = fs::read_to_string(d.join("work/descriptors/raw-avg.jsonl")).unwrap();
    let mut lines: Vec<String> = fs::read_to_string(&side).unwrap().lines().map(String::from).collect();
    lines[0] = raw.lines().next().unwrap().to_string();
    fs::write(&side, lines.join("\n") + "\n").unwrap();
    let out = run(d, &["eval", "--variant", "avg-g", "--metric", "eucl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));
}

#[test]
fn random_baseline_prints_curve() {
    let dir = setup(SMALL);
    let out = ok(dir.path(), &["eval", "--random-baseline", "--seed", "1"]);
    assert!(out.contains("random MAP@5"));
}
