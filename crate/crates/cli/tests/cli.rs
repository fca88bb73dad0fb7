use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "corpus": {"n_conversations": 30, "turns_per_conv": 4, "n_passages": 200, "vocab_size": 300,
             "dev_conversations": 5, "test_conversations": 5},
  "encoder": {"dim": 16, "hash_buckets": 1024},
  "pretrain": {"steps": 200},
  "joint": {"iterations": 40, "checkpoint_every": 20}
}"#;

fn convqa(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.json");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_convqa"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .env("CONVQA_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = convqa(dir, args);
    assert!(
        out.status.success(),
        "convqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn full_run(dir: &Path) {
    for stage in ["gen-corpus", "pretrain", "index", "train", "eval"] {
        ok(dir, &[stage, "--seed", "7"]);
    }
}

#[test]
fn seeded_runs_produce_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    for file in ["report_test.json", "report_test.csv", "train_log.jsonl", "joint.ckpt", "passages.index"] {
        let left = fs::read(a.path().join("run").join(file)).unwrap();
        let right = fs::read(b.path().join("run").join(file)).unwrap();
        assert!(left == right, "{file} differs between identical runs");
    }
    let recorded: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("run/eval.config.json")).unwrap()).unwrap();
    assert_eq!(recorded["seed"], 7);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path());
    let run = dir.path().join("run");
    let ckpt = fs::read(run.join("joint.ckpt")).unwrap();
    let log = fs::read(run.join("train_log.jsonl")).unwrap();
    let resume = run.join("joint-000020.ckpt");
    ok(dir.path(), &["train", "--seed", "7", "--resume", resume.to_str().unwrap()]);
    assert!(fs::read(run.join("joint.ckpt")).unwrap() == ckpt);
    assert!(fs::read(run.join("train_log.jsonl")).unwrap() == log);
}

#[test]
fn ask_prints_answer_with_score_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path());
    let stdout = ok(
        dir.path(),
        &["ask", "--seed", "7", "--question", "who built it", "--history", "tell me about the bridge"],
    );
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    for key in ["answer", "pid", "start", "end", "score", "breakdown"] {
        assert!(v.get(key).is_some(), "missing {key} in {stdout}");
    }
    let b = &v["breakdown"];
    let sum = b["s_post"].as_f64().unwrap() + b["s_select"].as_f64().unwrap() + b["s_span"].as_f64().unwrap();
    assert!((sum - v["score"].as_f64().unwrap()).abs() < 1e-9);
    assert!(v["start"].as_u64() <= v["end"].as_u64());
}

#[test]
fn eval_refuses_artifacts_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path());
    let out = convqa(dir.path(), &["eval", "--seed", "8"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("produced by config"), "{err}");
}

#[test]
fn ablate_labels_rows_and_disables_the_kl_term() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-corpus", "--seed", "7"]);
    let stdout = ok(dir.path(), &["ablate", "--seed", "7", "--variant", "full", "--variant", "no_kl"]);
    let rows: Vec<&str> = stdout.lines().collect();
    assert!(rows[0].starts_with("variant,seed,config_hash,"));
    assert!(rows[1].starts_with("full,7,"));
    assert!(rows[2].starts_with("no_kl,7,"));
    let hash = |row: &str| row.split(',').nth(2).unwrap().to_string();
    assert_ne!(hash(rows[1]), hash(rows[2]));

    let read = |name: &str| -> serde_json::Value {
        serde_json::from_slice(&fs::read(dir.path().join("run/ablation").join(name)).unwrap()).unwrap()
    };
    let full = read("full.config.json");
    let no_kl = read("no_kl.config.json");
    assert_eq!(no_kl["pretrain"]["alpha"], 0.0);
    assert_ne!(full["pretrain"]["alpha"], 0.0);
}

#[test]
fn t_larger_than_k_is_rejected_naming_t() {
    let dir = tempfile::tempdir().unwrap();
    let out = convqa(dir.path(), &["gen-corpus", "--set", "retrieval.k=5", "--set", "retrieval.t=6"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`T`"), "{err}");
}

#[test]
fn unknown_override_is_rejected_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = convqa(dir.path(), &["gen-corpus", "--set", "reader.nonsense=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reader.nonsense"));
}
