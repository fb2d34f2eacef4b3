//! The command-line front end: outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptbound"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn bound_arithmetic_and_usage_errors() {
    let out = run(&["bound", "--risk", "0.1", "--n", "200", "--kl", "5"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("pb_bound 0.30"));
    assert_eq!(code(&run(&["bound", "--risk", "0.1"])), 2);
    assert_eq!(
        code(&run(&[
            "--delta", "1.5", "bound", "--risk", "0", "--n", "1", "--kl", "0"
        ])),
        2
    );
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["--config", "/nonexistent.json", "grid"])), 2);
}

#[test]
fn generated_world_feeds_a_file_backed_search() {
    let dir = tempdir().unwrap();
    let world = dir.path().join("world");
    let args = [
        "--seed",
        "2",
        "--out",
        p(&world),
        "gen-synth",
        "--vocab",
        "12",
        "--dim",
        "8",
        "--classes",
        "2",
        "--train-per-class",
        "20",
        "--test-per-class",
        "20",
    ];
    assert_eq!(code(&run(&args)), 0);
    for f in [
        "train.pbem",
        "train.pblb",
        "vocab.txt",
        "planted.json",
        "corpus.txt",
        "text.idx",
    ] {
        assert!(world.join(f).exists(), "{f}");
    }

    let w = |f: &str| world.join(f).to_str().unwrap().to_string();
    let cfg = serde_json::json!({
        "source": {
            "kind": "files",
            "train_embeddings": w("train.pbem"), "train_labels": w("train.pblb"),
            "test_embeddings": w("test.pbem"), "test_labels": w("test.pblb"),
            "vocab": w("vocab.txt"), "class_names": w("classes.txt"),
            "text_embeddings": w("text.pbem"), "text_index": w("text.idx"),
        },
        "prior": { "kind": "uniform" },
        "search": { "candidates": { "kind": "full" }, "criterion": { "kind": "greedy" }, "initial_prompt": [], "length": 1, "seed": 0 },
    });
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("search");
    assert_eq!(
        code(&run(&[
            "--config",
            p(&cfg_path),
            "--out",
            p(&out),
            "search"
        ])),
        0
    );
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let prompts = out.join("prompts.json");
    let cert = run(&["--config", p(&cfg_path), "bound", "--prompts", p(&prompts)]);
    assert_eq!(code(&cert), 0);
    let eval: serde_json::Value = serde_json::from_slice(&cert.stdout).unwrap();
    assert!((eval["kl"].as_f64().unwrap() - 2.0 * 12f64.ln()).abs() < 1e-9);

    // Length-2 prompts are not in the cache: a data error.
    let miss = run(&[
        "--config",
        p(&cfg_path),
        "--out",
        p(&out),
        "search",
        "--length",
        "2",
    ]);
    assert_eq!(code(&miss), 3);
}

#[test]
fn experiment_reports_merge() {
    let dir = tempdir().unwrap();
    let cfg = serde_json::json!({
        "source": { "kind": "synthetic", "spec": { "classes": 2, "dim": 8, "noise": 0.2, "prompt_len": 1, "seed": 0, "test_per_class": 10, "train_per_class": 10, "vocab_size": 8 } },
        "search": { "candidates": { "kind": "full" }, "criterion": { "kind": "greedy" }, "initial_prompt": [], "length": 1, "seed": 0 },
        "betas": [0.0, 1.0],
        "trials": 2,
    });
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        code(&run(&["--config", p(&cfg_path), "--out", p(&out), "srm"])),
        0
    );
    let csv = out.join("srm_compare.csv");
    assert!(out.join("srm_compare.manifest.json").exists());

    let merged = dir.path().join("merged");
    assert_eq!(
        code(&run(&["--out", p(&merged), "export-report", p(&csv)])),
        0
    );
    assert_eq!(
        fs::read(&csv).unwrap(),
        fs::read(merged.join("report.csv")).unwrap()
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(merged.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"], 4);
    assert_eq!(summary["groups"].as_array().unwrap().len(), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "nope\n").unwrap();
    assert_eq!(code(&run(&["export-report", p(&bad)])), 3);
}
