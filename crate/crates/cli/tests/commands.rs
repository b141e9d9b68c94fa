use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "learning_rate": 0.005,
  "batch_size": 4,
  "warmup_steps": 1,
  "total_steps": 4,
  "top_k": 2,
  "refresh_interval": 2,
  "pretrain": {"learning_rate": 0.005, "batch_size": 4, "warmup_steps": 1, "total_steps": 3},
  "model": {"d_model": 16, "heads": 2, "layers": 1, "d_ff": 32, "max_len": 32, "max_target_len": 16},
  "decode": {"beam": 2, "max_len": 8, "min_len": 1},
  "quantizer": {"n_list": 2, "iters": 3, "seed": 0}
}"#;

fn ragmds(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragmds"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_fixture(dir: &Path) {
    let lines: Vec<String> = (0..8)
        .map(|i| {
            serde_json::json!({
                "id": format!("p{i}"),
                "abstract": format!("we study problem q{} using tool t{}", i % 3, i % 2),
                "ref_abstracts": [format!("tool t{} was introduced for q{}", i % 2, (i + 1) % 3)],
                "related_work": format!("t{} has been applied to q{} before", i % 2, i % 3),
            })
            .to_string()
        })
        .collect();
    std::fs::write(dir.join("data.jsonl"), lines.join("\n") + "\n").unwrap();
    std::fs::write(dir.join("config.json"), CONFIG).unwrap();
}

fn json_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    let cfg = ["--config", "config.json", "--seed", "3"];

    ok(ragmds(dir, &[&cfg[..], &["pretrain", "--data", "data.jsonl", "--output", "pre"]].concat()));
    for f in ["params.bin", "optim.bin", "meta.json", "vocab.txt", "pretrain_log.jsonl"] {
        assert!(dir.join("pre").join(f).exists(), "{f}");
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pre/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 3);

    ok(ragmds(dir, &[&cfg[..], &["build-index", "--data", "data.jsonl", "--checkpoint", "pre", "--output", "index.bin"]].concat()));
    assert!(dir.join("index.bin").exists());

    ok(ragmds(
        dir,
        &[&cfg[..], &["train", "--data", "data.jsonl", "--checkpoint", "pre", "--index", "index.bin", "--output", "joint"]].concat(),
    ));
    let log = json_lines(&dir.join("joint/train_log.jsonl"));
    assert_eq!(log.len(), 4);
    for key in ["step", "loss", "lr", "grad_norm", "lambda_mean", "retrieval_hit_rate"] {
        assert!(log[0].get(key).is_some(), "{key}");
    }
    assert!(log[0]["lambda_mean"].is_number());

    let out = ok(ragmds(dir, &["generate", "--data", "data.jsonl", "--checkpoint", "joint", "--index", "joint/index.bin"]));
    let generated: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(generated.len(), 8);
    assert_eq!(generated[0]["id"], "p0");

    let out = ok(ragmds(
        dir,
        &["evaluate", "--data", "data.jsonl", "--checkpoint", "joint", "--index", "joint/index.bin", "--output", "eval/out.jsonl"],
    ));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["records"], 8);
    let rows = json_lines(&dir.join("eval/out.jsonl"));
    assert_eq!(rows.len(), 8);
    for key in ["id", "generated", "target", "r1", "r2", "rl"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }
    assert!(dir.join("eval/out.jsonl.aggregate.json").exists());
}

#[test]
fn training_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    for out in ["a", "b"] {
        ok(ragmds(
            dir,
            &["--config", "config.json", "train", "--skip-pretrain", "--data", "data.jsonl", "--output", out],
        ));
    }
    let a = std::fs::read_to_string(dir.join("a/train_log.jsonl")).unwrap();
    let b = std::fs::read_to_string(dir.join("b/train_log.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read(dir.join("a/params.bin")).unwrap(), std::fs::read(dir.join("b/params.bin")).unwrap());
}

#[test]
fn score_compares_line_aligned_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.txt"), "the cat sat\na c b d\n").unwrap();
    std::fs::write(dir.join("r.txt"), "the cat\na b c d\n").unwrap();
    let out = ok(ragmds(dir, &["score", "c.txt", "r.txt"]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["records"], 2);
    // mean of 0.8 and 1.0
    assert_eq!(report["r1"], 90.0);

    std::fs::write(dir.join("short.txt"), "one line\n").unwrap();
    assert!(!ragmds(dir, &["score", "c.txt", "short.txt"]).status.success());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_fixture(dir);
    let missing = ragmds(dir, &["evaluate", "--data", "data.jsonl", "--checkpoint", "nope", "--output", "o.jsonl"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    // train needs a starting point
    assert!(!ragmds(dir, &["train", "--data", "data.jsonl", "--output", "x"]).status.success());

    std::fs::write(dir.join("bad.json"), r#"{"precision": "f32"}"#).unwrap();
    let bad = ragmds(dir, &["--config", "bad.json", "train", "--skip-pretrain", "--data", "data.jsonl", "--output", "x"]);
    assert!(!bad.status.success());

    std::fs::write(dir.join("zero.json"), r#"{"batch_size": 0}"#).unwrap();
    let zero = ragmds(dir, &["--config", "zero.json", "train", "--skip-pretrain", "--data", "data.jsonl", "--output", "x"]);
    assert!(!zero.status.success());
}
