use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use esc_fusion::corpus::save_corpus;
use esc_fusion::synthetic::synthetic_corpus;

fn esc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_overrides() -> Vec<String> {
    [
        "model.d=8",
        "model.heads=2",
        "model.enc_layers=1",
        "model.dec_layers=1",
        "model.ff_mult=1",
        "model.cog_len=8",
        "model.max_enc_len=64",
        "train.max_epochs=1",
        "train.checkpoint_min_epoch=1",
        "eval.max_examples=4",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn fixture(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.json");
    save_corpus(&path, &synthetic_corpus(20, 3, 1)).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ingest_writes_three_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture(dir.path());
    let out = dir.path().join("run");
    let run = || esc(&["--out", out.to_str().unwrap(), "--seed", "3", "ingest", "--corpus", corpus.to_str().unwrap()]);
    let first = run();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for split in ["train", "valid", "test"] {
        assert!(out.join("splits").join(format!("{split}.json")).exists());
    }
    let summary: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(summary["train_dialogues"], 16);
    let snapshot: Vec<(PathBuf, Vec<u8>)> = files_under(&out).into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect();
    assert!(run().status.success());
    let again: Vec<(PathBuf, Vec<u8>)> = files_under(&out).into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect();
    assert_eq!(snapshot, again, "artifacts must be byte-identical across reruns");
}

#[test]
fn malformed_corpus_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.json");
    fs::write(&corpus, "[{\"id\": \"x\", \"turns\": [").unwrap();
    let out = dir.path().join("run");
    let result = esc(&["--out", out.to_str().unwrap(), "ingest", "--corpus", corpus.to_str().unwrap()]);
    assert!(!result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("error"));
    assert!(files_under(&out).is_empty());
}

#[test]
fn train_without_index_names_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture(dir.path());
    let out = dir.path().join("run");
    assert!(esc(&["--out", out.to_str().unwrap(), "ingest", "--corpus", corpus.to_str().unwrap()]).status.success());
    fs::remove_file(out.join("index.bin")).unwrap();
    let result = esc(&["--out", out.to_str().unwrap(), "train"]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("index.bin"), "{stderr}");
}

#[test]
fn unknown_override_is_rejected() {
    let result = esc(&["--set", "train.learning_rate=1", "s-norm", "--table", "x.csv"]);
    assert!(!result.status.success());
    assert!(String::from_utf8_lossy(&result.stderr).contains("learning_rate"));
}

#[test]
fn s_norm_command_prints_json_and_table() {
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/table1.csv");
    let result = esc(&["s-norm", "--table", table]);
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("\"method\": \"MIME\""));
    assert!(stdout.contains("s_norm"));
    assert!(stdout.lines().any(|l| l.starts_with("D2RCU w/ norm")));
}

#[test]
fn end_to_end_train_evaluate_retrieve_chat() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let mut base = vec!["--out", out_s];
    let overrides = tiny_overrides();
    base.extend(overrides.iter().map(String::as_str));
    let with = |extra: &[&str]| {
        let mut args = base.clone();
        args.extend_from_slice(extra);
        esc(&args)
    };
    assert!(with(&["ingest", "--corpus", corpus.to_str().unwrap()]).status.success());
    let trained = with(&["train"]);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    assert!(out.join("checkpoints/best.bin").exists());
    assert!(out.join("checkpoints/ckpt-epoch1.bin").exists());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    for line in log.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let sum: f64 = record["lambda"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    let evaluated = with(&["evaluate", "--split", "test", "--table"]);
    assert!(evaluated.status.success(), "{}", String::from_utf8_lossy(&evaluated.stderr));
    let stdout = String::from_utf8_lossy(&evaluated.stdout);
    let json_end = stdout.find("\n}\n").unwrap() + 2;
    let report: serde_json::Value = serde_json::from_str(&stdout[..json_end]).unwrap();
    for key in ["acc", "ppl", "bleu", "distinct", "rouge_l", "acc_top_n"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(stdout[json_end..].contains("B-4"));
    let again = with(&["evaluate", "--split", "test"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout).trim_end(), &stdout[..json_end]);

    let retrieved = with(&["retrieve", "--query", "i feel sad about my job", "--top-s", "3"]);
    assert!(retrieved.status.success());
    let demos: serde_json::Value = serde_json::from_slice(&retrieved.stdout).unwrap();
    assert_eq!(demos.as_array().unwrap().len(), 3);

    let mut args = base.clone();
    args.push("chat");
    let mut child = Command::new(env!("CARGO_BIN_EXE_esc"))
        .args(&args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"my exams make me anxious .\n/show-lambda\n/reset\nstill anxious\n/quit\nnever read\n")
        .unwrap();
    let chat = child.wait_with_output().unwrap();
    assert!(chat.status.success());
    let text = String::from_utf8_lossy(&chat.stdout);
    let replies: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("System: ")).collect();
    assert_eq!(replies.len(), 2, "{text}");
    for r in replies {
        assert!(r.starts_with('[') && r.contains(']'), "{r}");
    }
    let lambda_line = text.lines().find(|l| l.starts_with("lambda = ")).unwrap();
    let sum: f64 = lambda_line
        .split(['[', ']'])
        .nth(1)
        .unwrap()
        .split(", ")
        .map(|v| v.parse::<f64>().unwrap())
        .sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert!(text.contains("context cleared"));
}

#[test]
fn chat_ends_cleanly_at_end_of_input() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let overrides = tiny_overrides();
    let mut base = vec!["--out", out_s];
    base.extend(overrides.iter().map(String::as_str));
    let mut ingest = base.clone();
    ingest.extend(["ingest", "--corpus", corpus.to_str().unwrap()]);
    assert!(esc(&ingest).status.success());
    let mut train = base.clone();
    train.push("train");
    assert!(esc(&train).status.success());
    let mut chat = base.clone();
    chat.push("chat");
    let child = Command::new(env!("CARGO_BIN_EXE_esc"))
        .args(&chat)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    assert!(child.wait_with_output().unwrap().status.success());
}
