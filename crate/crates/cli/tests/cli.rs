use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sgad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sgad(args);
    assert!(
        out.status.success(),
        "sgad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "--count", "10", "--out", s(&a), "--seed", "7"]);
    ok(&["gen", "--count", "10", "--out", s(&b), "--seed", "7"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 60);
    assert_eq!(ta, tb);
    let c = tmp.path().join("c");
    ok(&["gen", "--count", "10", "--out", s(&c), "--seed", "8"]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn filtering_never_adds_matches() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    ok(&["gen", "--count", "3", "--out", s(&data), "--seed", "3"]);
    for k in 0..3 {
        let pair = data.join(format!("pair_{k:06}"));
        let m = tmp.path().join(format!("m{k}.jsonl"));
        ok(&["match", "--pair", s(&pair), "--out", s(&m), "--seed", "3"]);
        let before = fs::read_to_string(&m).unwrap().lines().count();
        for side in ["a", "b"] {
            let f = tmp.path().join(format!("f{k}{side}.jsonl"));
            ok(&["filter", "--pair", s(&pair), "--matches", s(&m), "--side", side, "--out", s(&f)]);
            let text = fs::read_to_string(&f).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            let summary: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
            let summary = &summary["summary"];
            assert_eq!(summary["before"], before);
            assert_eq!(summary["after"], lines.len() - 1);
            assert_eq!(summary["side"], side);
            assert!(lines.len() - 1 <= before);
        }
    }
}

#[test]
fn match_is_deterministic_under_seed() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    ok(&["gen", "--count", "1", "--out", s(&data), "--seed", "5"]);
    let pair = data.join("pair_000000");
    let one = ok(&["match", "--pair", s(&pair), "--seed", "11"]).stdout;
    let two = ok(&["match", "--pair", s(&pair), "--seed", "11"]).stdout;
    assert_eq!(one, two);
}

#[test]
fn trained_model_separates_noise_free_scenes() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "sigma = 0\nnesting_prob = 0\ndistractors = 0\neval_pairs = 8\neval_every = 200\n").unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("run");
    ok(&["--config", s(&cfg), "gen", "--count", "10", "--start", "5000", "--out", s(&data)]);
    ok(&["--config", s(&cfg), "train", "--steps", "200", "--out", s(&run)]);
    assert!(run.join("metrics.csv").exists() && run.join("checkpoint_000200.bin").exists());
    let params = run.join("params.bin");
    let out = ok(&["--config", s(&cfg), "eval", "--data", s(&data), "--params", s(&params)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let first = &report["entries"][0];
    assert_eq!(first["threshold"], 0.2);
    let auc = first["auc"].as_f64().unwrap();
    assert!((auc - 1.0).abs() < 1e-6, "AUC@0.2 = {auc}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sgad(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sgad(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(sgad(&["gen"]).status.code(), Some(2));
    assert_eq!(sgad(&["filter", "--pair", "x", "--matches", "y", "--side", "c"]).status.code(), Some(2));
    assert_eq!(sgad(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = sgad(&["match", "--pair", s(&tmp.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(sgad(&["--config", s(&cfg), "gen", "--out", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(sgad(&["eval", "--data", s(tmp.path())]).status.code(), Some(1));
}

#[test]
fn gradcheck_and_bench_emit_json() {
    let out = ok(&["gradcheck", "--count", "2", "--seed", "4"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);

    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bench.json");
    ok(&["bench", "--sizes", "4,8", "--dim", "16", "--out", s(&path)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[1]["m"], 8);
    assert!(v["attend_match_slope"].is_number());
}
