use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--dim",
    "16",
    "--heads",
    "2",
    "--temporal-layers",
    "1",
    "--variable-layers",
    "1",
    "--extractor-layers",
    "1",
    "--tokens",
    "8",
    "--epochs",
    "2",
];

fn mm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mm-ists"))
        .current_dir(dir)
        .env_remove("MM_ISTS_CACHE")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn last_json(stdout: &str) -> Value {
    serde_json::from_str(stdout.lines().last().expect("output")).unwrap()
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

fn gen(dir: &Path) {
    ok(dir, &["gen", "--samples", "20", "--n-vars", "3", "--l-max", "8", "--out", "data.jsonl"]);
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--samples", "10", "--seed", "7", "--out", "a.jsonl"]);
    ok(d, &["gen", "--samples", "10", "--seed", "7", "--out", "b.jsonl"]);
    ok(d, &["gen", "--samples", "10", "--seed", "8", "--out", "c.jsonl"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    assert_eq!(String::from_utf8(read("a.jsonl")).unwrap().lines().count(), 10);
}

#[test]
fn gradcheck_passes_default_instance() {
    let dir = tempfile::tempdir().unwrap();
    let report = last_json(&ok(dir.path(), &["gradcheck"]));
    assert_eq!(report["passed"], Value::Bool(true));
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
    assert_eq!(report["variant"], "full");
}

#[test]
fn eval_on_val_matches_logged_best() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let mut args = vec!["train", "--data", "data.jsonl", "--out", "run"];
    args.extend_from_slice(SMALL);
    let summary = last_json(&ok(d, &args));
    let best = summary["best_score"].as_f64().unwrap();
    let logged = std::fs::read_to_string(d.join("run/epochs.ndjson")).unwrap();
    let best_logged = logged
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["val_mse"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, best_logged);

    let val = last_json(&ok(d, &["eval", "--run", "run", "--data", "data.jsonl", "--split", "val"]));
    assert!((val["metrics"]["mse"].as_f64().unwrap() - best).abs() <= 1e-9);
    let test = last_json(&ok(d, &["eval", "--run", "run", "--data", "data.jsonl"]));
    assert_eq!(test["split"], "test");
    assert_eq!(test["metrics"]["mse"], summary["test"]["mse"]);
}

#[test]
fn file_cache_matches_synthetic_provider() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    ok(d, &["embed", "--data", "data.jsonl", "--tokens", "8", "--cache-dir", "cache"]);
    assert_eq!(std::fs::read_dir(d.join("cache")).unwrap().count(), 20);
    let mut synth = vec!["train", "--data", "data.jsonl", "--out", "a"];
    synth.extend_from_slice(SMALL);
    let mut cached = vec!["train", "--data", "data.jsonl", "--out", "b", "--provider", "file-cache"];
    cached.extend_from_slice(SMALL);
    let a = ok(d, &synth);
    let out = Command::new(env!("CARGO_BIN_EXE_mm-ists"))
        .current_dir(d)
        .env("MM_ISTS_CACHE", "cache")
        .args(&cached)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b = String::from_utf8(out.stdout).unwrap();
    let strip = |s: &str| -> Vec<Value> {
        s.lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                if let Some(o) = v.as_object_mut() {
                    o.remove("seconds");
                    o.remove("run");
                }
                v
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn missing_cache_entry_is_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let e = error_of(&mm(
        d,
        &["train", "--data", "data.jsonl", "--provider", "file-cache", "--cache-dir", "nowhere"],
    ));
    assert_eq!(e["error"], "NotFound");
}

#[test]
fn errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(error_of(&mm(d, &["train"]))["error"], "MissingInput");
    assert_eq!(error_of(&mm(d, &["train", "--data", "absent.jsonl"]))["error"], "MissingInput");
    assert_eq!(error_of(&mm(d, &["eval", "--run", "x", "--data", "absent.jsonl"]))["error"], "NotFound");
    assert_eq!(error_of(&mm(d, &["gen", "--obs-rate", "0"]))["error"], "ConfigInvalid");
    assert_eq!(error_of(&mm(d, &["train", "--nonsense"]))["error"], "Usage");
    std::fs::write(d.join("bad.toml"), "[model]\ndepth = 2\n").unwrap();
    assert_eq!(error_of(&mm(d, &["config", "--config", "bad.toml"]))["error"], "ConfigInvalid");
    let e = error_of(&mm(d, &["gradcheck", "--variant", "nope"]));
    assert_eq!(e["error"], "UnknownVariant");
}

#[test]
fn every_config_key_has_a_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let help = ok(d, &["train", "--help"]);
    let toml = ok(d, &["config", "--cache-dir", "c", "--seq-len-cap", "4", "--image-height", "2", "--image-width", "2", "--predictor-hidden", "3"]);
    let mut section = String::new();
    let mut checked = 0;
    for line in toml.lines() {
        if let Some(s) = line.strip_prefix('[') {
            section = s.trim_end_matches(']').to_string();
            continue;
        }
        let Some((key, _)) = line.split_once(" = ") else { continue };
        let flag = match (section.as_str(), key) {
            ("model", "n_vars") => "model-n-vars".to_string(),
            ("embedding", "kind") => "provider".to_string(),
            ("embedding", "fallback") => "cache-fallback".to_string(),
            _ => key.replace('_', "-"),
        };
        assert!(help.contains(&format!("--{flag}")), "no flag for [{section}] {key}");
        checked += 1;
    }
    assert!(checked >= 35, "only {checked} keys seen");
}

#[test]
fn ablate_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let mut args = vec!["ablate", "--data", "data.jsonl", "--out", "abl"];
    args.extend_from_slice(SMALL);
    let table = ok(d, &args);
    assert_eq!(table.lines().count(), 6);
    let csv = std::fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "without-text", "without-image", "without-qbe", "without-align"]);
}

#[test]
fn alignment_dump_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let mut args = vec!["train", "--data", "data.jsonl", "--out", "run"];
    args.extend_from_slice(SMALL);
    ok(d, &args);
    ok(d, &["dump-align", "--run", "run", "--data", "data.jsonl", "--out", "a.json"]);
    ok(d, &["dump-align", "--run", "run", "--data", "data.jsonl", "--out", "b.json"]);
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap());
    let dump: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(dump["gates"].as_array().unwrap().len(), 3);
    for h in dump["attention"].as_array().unwrap() {
        let cols = h["cols"].as_u64().unwrap() as usize;
        for row in h["weights"].as_array().unwrap().chunks(cols) {
            let s: f64 = row.iter().map(|v| v.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    let mut args = vec!["train", "--data", "data.jsonl", "--out", "add", "--variant", "without-align"];
    args.extend_from_slice(SMALL);
    ok(d, &args);
    let text = ok(d, &["dump-align", "--run", "add", "--data", "data.jsonl"]);
    assert!(!text.contains("alpha_mm"));
}
