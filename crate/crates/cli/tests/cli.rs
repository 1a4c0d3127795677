use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn embleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embleak")).args(args).output().expect("spawn embleak")
}

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/demo.json")
}

fn generate(dir: &Path) -> (String, String) {
    let trace = dir.join("demo.csv");
    let out = embleak(&["gen", "--config", demo().to_str().unwrap(), "--out", trace.to_str().unwrap(), "--report", dir.join("gen.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (trace.display().to_string(), dir.join("demo.profiles.csv").display().to_string())
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_exits_zero_with_usage() {
    let out = embleak(&["stats", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"), "{text}");
    assert!(text.contains("--column"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let out = embleak(&["stats", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = embleak(&["anonymity", "--profiles", "x.csv"]);
    assert_eq!(out.status.code(), Some(2), "missing required --features");
}

#[test]
fn unreadable_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = embleak(&["stats", "--trace", dir.path().join("missing.csv").to_str().unwrap(), "--column", "item", "--P", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "user_id,timestamp,item\n1,notatime,3\n").unwrap();
    let out = embleak(&["stats", "--trace", bad.to_str().unwrap(), "--column", "item", "--P", "10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn attack_freq_writes_top_k_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (trace, _) = generate(dir.path());
    let csv = dir.path().join("freq.csv");
    let json = dir.path().join("freq.json");
    let out = embleak(&[
        "--seed", "3", "attack-freq", "--trace", &trace, "--column", "item", "--P", "500", "--K", "7",
        "--out", json.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,accuracy");
    assert_eq!(lines.len(), 8);
    let acc: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[0] <= w[1]));

    let r = report(&json);
    assert_eq!(r["manifest"]["subcommand"], "attack-freq");
    assert_eq!(r["manifest"]["seeds"]["seed"], 3);
    assert!(r["manifest"]["wall_clock_ms"].is_null());
    assert_eq!(r["result"]["top_k_accuracy"].as_array().unwrap().len(), 7);
}

#[test]
fn report_goes_to_stdout_without_out() {
    let dir = tempfile::tempdir().unwrap();
    let (_, profiles) = generate(dir.path());
    let out = embleak(&["--timing", "anonymity", "--profiles", &profiles, "--features", "gender,age_level"]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["manifest"]["wall_clock_ms"].is_u64());
    assert_eq!(r["manifest"]["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn pipeline_reports_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (trace, profiles) = generate(dir.path());
    let p = |name: &str| dir.path().join(name).display().to_string();
    let runs: Vec<Vec<String>> = [
        vec!["stats", "--trace", &trace, "--column", "item", "--P", "300", "--out", &p("stats.json")],
        vec!["hash-apply", "--trace", &trace, "--column", "item", "--variant", "map", "--P", "300", "--out", &p("h.csv"), "--spec-out", &p("spec.json"), "--report", &p("hash.json")],
        vec!["attack-greedy", "--trace", &trace, "--column", "item", "--hash", &p("spec.json"), "--out", &p("greedy.json")],
        vec!["ambiguity", "--trace", &trace, "--profiles", &profiles, "--item", "item", "--group", "age_level", "--out", &p("amb.json")],
        vec!["reident-link", "--trace", &trace, "--out", &p("link.json")],
    ]
    .iter()
    .map(|v| v.iter().map(|s| s.to_string()).collect())
    .collect();
    let reports = ["stats.json", "hash.json", "greedy.json", "amb.json", "link.json"];
    let mut first = Vec::new();
    for round in 0..2 {
        for (args, name) in runs.iter().zip(reports) {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = embleak(&args);
            assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
            let r = report(&dir.path().join(name));
            let digests: Vec<Value> = r["manifest"]["inputs"].as_array().unwrap().clone();
            assert!(!digests.is_empty());
            if round == 0 {
                first.push(std::fs::read(dir.path().join(name)).unwrap());
            } else {
                let idx = reports.iter().position(|&n| n == name).unwrap();
                assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), first[idx], "{name} changed");
            }
        }
    }
    let greedy = report(&dir.path().join("greedy.json"));
    assert!(greedy["manifest"]["inputs"].as_array().unwrap().iter().any(|i| i["path"].as_str().unwrap().ends_with("spec.json")));
}
