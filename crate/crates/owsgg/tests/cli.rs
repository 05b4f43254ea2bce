use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Copy a bundled fixture into a scratch directory.
fn scratch(name: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture(name);
    for file in ["manifest.jsonl", "vocab.json", "config.toml"] {
        std::fs::copy(src.join(file), dir.path().join(file)).unwrap();
    }
    std::fs::create_dir(dir.path().join("cache")).unwrap();
    std::fs::copy(src.join("cache/backend.jsonl"), dir.path().join("cache/backend.jsonl")).unwrap();
    dir
}

fn owsgg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owsgg")).args(args).current_dir(dir).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const RUN_ALL: [&str; 10] = [
    "run",
    "all",
    "--manifest",
    "manifest.jsonl",
    "--config",
    "config.toml",
    "--vocab",
    "vocab.json",
    "--cache",
    "cache",
];

#[test]
fn replay_run_then_report_rebuilds_the_same_report() {
    let dir = scratch("replay5");
    let out = owsgg(&RUN_ALL, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read(dir.path().join("cache/report.json")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("cache/report.csv")).unwrap();
    assert!(csv.starts_with("split,metric,k,value\n"));
    assert!(csv.contains("pair_refinement,F1,,"));
    let run = json(&dir.path().join("cache/run.json"));
    assert_eq!(run["live_calls"], 0);
    assert_eq!(run["errors"], 0);

    std::fs::remove_file(dir.path().join("cache/report.json")).unwrap();
    let out = owsgg(&["report", "--cache", "cache", "--config", "config.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(dir.path().join("cache/report.json")).unwrap(), report);
}

#[test]
fn single_stages_in_order() {
    let dir = scratch("replay5");
    for stage in ["entities", "map", "detect", "refine", "relate", "eval"] {
        let mut args = RUN_ALL.to_vec();
        args[1] = stage;
        let out = owsgg(&args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(format!("cache/stages/{stage}.jsonl")).exists());
    }
    let preds = std::fs::read_to_string(dir.path().join("cache/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 5);
}

#[test]
fn predcls_task_override() {
    let dir = scratch("predcls3");
    let mut args = RUN_ALL.to_vec();
    args.extend(["--task", "predcls"]);
    let out = owsgg(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&dir.path().join("cache/report.json"))["task"], "predcls");
}

#[test]
fn image_failures_exit_one() {
    let dir = scratch("replay5");
    std::fs::write(dir.path().join("cache/backend.jsonl"), "").unwrap();
    let out = owsgg(&RUN_ALL, dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 5);
    assert!(stdout.contains("ReplayMiss"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = scratch("replay5");
    let mut args = RUN_ALL.to_vec();
    args[1] = "everything";
    assert_eq!(owsgg(&args, dir.path()).status.code(), Some(2));

    std::fs::write(dir.path().join("bad.toml"), "[fusion]\nalpha = 2.0\n").unwrap();
    let mut args = RUN_ALL.to_vec();
    args[5] = "bad.toml";
    let out = owsgg(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    std::fs::write(dir.path().join("typo.toml"), "[fusion]\nalpah = 0.3\n").unwrap();
    args[5] = "typo.toml";
    assert_eq!(owsgg(&args, dir.path()).status.code(), Some(2));

    assert_eq!(owsgg(&["report", "--cache", "nowhere"], dir.path()).status.code(), Some(2));
}

#[test]
fn validate_prints_one_diagnostic_per_line() {
    let dir = scratch("replay5");
    let out = owsgg(&["validate", "--manifest", "manifest.jsonl", "--vocab", "vocab.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());

    let bad = concat!(
        r#"{"id":"a","path":"a.jpg","width":10,"height":10,"objects":[{"label":"unicorn","box":[0,0,5,5]},{"label":"cup","box":[4,4,4,9]}],"relations":[{"s":0,"o":0,"p":"on"}]}"#,
        "\n",
        "not json\n",
    );
    std::fs::write(dir.path().join("bad.jsonl"), bad).unwrap();
    let out = owsgg(&["validate", "--manifest", "bad.jsonl", "--vocab", "vocab.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let kinds: Vec<String> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    for kind in ["UnknownLabel", "DegenerateBox", "SelfRelation", "ParseError"] {
        assert!(kinds.iter().any(|k| k == kind), "{kind} missing from {kinds:?}");
    }
}

#[test]
fn splits_command_honours_novel_lists() {
    let dir = scratch("replay5");
    let out =
        owsgg(&["splits", "--manifest", "manifest.jsonl", "--vocab", "vocab.json", "--out", "splits.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let splits = json(&dir.path().join("splits.json"));
    assert_eq!(splits["split"]["OW"], serde_json::json!(["img3#1"]));

    // declaring "near" novel too moves the dog-near-cat triplet from OVD to OW
    std::fs::write(dir.path().join("novel_obj.txt"), "dog\ncat\n").unwrap();
    std::fs::write(dir.path().join("novel_rel.txt"), "riding\nunder\nnear\n").unwrap();
    let out = owsgg(
        &[
            "splits",
            "--manifest",
            "manifest.jsonl",
            "--vocab",
            "vocab.json",
            "--novel-objects",
            "novel_obj.txt",
            "--novel-relations",
            "novel_rel.txt",
            "--out",
            "splits2.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let splits = json(&dir.path().join("splits2.json"));
    assert_eq!(splits["split"]["OW"], serde_json::json!(["img3#0", "img3#1"]));
    assert!(splits["split"].get("OVD").is_none_or(|v| v.as_array().is_some_and(Vec::is_empty)));
}
