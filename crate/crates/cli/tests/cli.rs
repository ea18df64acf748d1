use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "epochs = 1\nbatch_size = 4\nepisodes = 8\neval_episodes = 4\n";

fn ldag(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.cfg");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ldag"))
        .current_dir(dir)
        .args(["--config", "small.cfg", "--offline", "--threads", "2"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_fixtures_is_deterministic_and_refuses_to_overwrite() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&ldag(a.path(), &["--out", "o", "gen-fixtures"]));
    ok(&ldag(b.path(), &["--out", "o", "gen-fixtures"]));
    assert_eq!(tree(&a.path().join("o")), tree(&b.path().join("o")));

    let manifest = json(a.path().join("o/manifest.json"));
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 8);
    assert_eq!(fs::read_dir(a.path().join("o/fixtures")).unwrap().count(), 8 * 6);

    let again = ldag(a.path(), &["--out", "o", "gen-fixtures"]);
    assert_eq!(again.status.code(), Some(1));
    ok(&ldag(a.path(), &["--out", "o", "--force", "gen-fixtures"]));
}

#[test]
fn attributes_prints_one_line_per_prompt() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(&ldag(d.path(), &["--n", "3", "attributes", "--class", "coin"]));
    assert_eq!(text.lines().filter(|l| l.starts_with("fg ")).count(), 4);
    assert_eq!(text.lines().filter(|l| l.starts_with("bg:")).count(), 1);
    assert!(d.path().join("out/attributes/coin__n3.json").exists());

    let bad = ldag(d.path(), &["attributes", "--class", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn prior_writes_one_map_per_prompt_deterministically() {
    let d = tempfile::tempdir().unwrap();
    ok(&ldag(d.path(), &["--n", "2", "--out", "a", "prior"]));
    ok(&ldag(d.path(), &["--n", "2", "--out", "b", "prior"]));
    let a = tree(&d.path().join("a/prior"));
    assert_eq!(a, tree(&d.path().join("b/prior")));
    assert_eq!(a.iter().filter(|(p, _)| p.contains("prior_")).count(), 3);
    let scores = a.iter().find(|(p, _)| p.ends_with("scores.json")).unwrap();
    let scores: Value = serde_json::from_slice(&scores.1).unwrap();
    assert_eq!(scores["n"], 2);
    assert!(a.iter().all(|(p, bytes)| !p.ends_with(".pgm") || bytes.starts_with(b"P5")));
}

#[test]
fn train_eval_predict_round_trip() {
    let d = tempfile::tempdir().unwrap();
    ok(&ldag(d.path(), &["--n", "2", "train"]));
    assert!(d.path().join("out/checkpoint").is_dir());
    assert!(fs::read_to_string(d.path().join("out/metrics.jsonl")).unwrap().lines().count() >= 1);

    ok(&ldag(d.path(), &["eval"]));
    let report = json(d.path().join("out/report.json"));
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_eq!(report["episode_count"], 4);
    assert_eq!(report["config"]["n"], 2);
    let csv = fs::read_to_string(d.path().join("out/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    ok(&ldag(d.path(), &["predict", "--episode", "1"]));
    let pred = fs::read_dir(d.path().join("out/predict")).unwrap().next().unwrap().unwrap().path();
    let p = json(pred.join("prediction.json"));
    for key in ["episode_id", "class", "fold", "iou"] {
        assert!(p.get(key).is_some(), "missing {key}");
    }
    assert!(pred.join("probability.pgm").exists() && pred.join("mask.pgm").exists());

    let mismatch = ldag(d.path(), &["--n", "3", "eval"]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn files_provider_trains_like_the_toy_world() {
    let d = tempfile::tempdir().unwrap();
    ok(&ldag(d.path(), &["--out", "g", "gen-fixtures"]));
    let toy = ok(&ldag(d.path(), &["--out", "t", "train"]));
    let files = ok(&ldag(d.path(), &["--out", "f", "--provider", "files", "--data", "g/dataset", "train"]));
    let checksum = |s: &str| s.split("checksum ").nth(1).map(str::trim).map(str::to_owned);
    assert!(checksum(&toy).is_some());
    assert_eq!(checksum(&toy), checksum(&files));
}

#[test]
fn ablate_sweeps_echo_their_cells() {
    let d = tempfile::tempdir().unwrap();
    ok(&ldag(d.path(), &["--out", "a", "ablate", "--sweep", "alpha"]));
    ok(&ldag(d.path(), &["--out", "n", "ablate", "--sweep", "n"]));

    let summary = fs::read_to_string(d.path().join("a/ablate/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5);
    let cells: Vec<_> = fs::read_dir(d.path().join("a/ablate/alpha")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 5);
    for cell in cells {
        let report = json(cell.join("report.json"));
        let alpha = report["config"]["alpha"].as_f64().unwrap();
        assert_eq!(cell.file_name().unwrap().to_str().unwrap(), format!("alpha-{alpha}"));
    }

    let ns: Vec<_> = fs::read_dir(d.path().join("n/ablate/n")).unwrap().collect();
    assert_eq!(ns.len(), 7);
    let n0 = json(d.path().join("n/ablate/n/n-0/report.json"));
    assert_eq!(n0["config"]["n"], 0);
}

#[test]
fn bad_configuration_exits_with_usage_status() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["--alpha", "-1", "train"][..],
        &["--epochs", "x", "train"],
        &["--provider", "files", "train"],
        &["--fold", "4", "train"],
        &["nonsense"],
    ] {
        assert_eq!(ldag(d.path(), args).status.code(), Some(2), "{args:?}");
    }
    fs::write(d.path().join("bad.cfg"), "alpha = 0.5\nbeta = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ldag"))
        .current_dir(d.path())
        .args(["--config", "bad.cfg", "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:2:"));
}
