use std::path::Path;
use std::process::{Command, Output};

use lrc::corpus::load_token_file;
use lrc::train::{load_projection, METRICS_HEADER};

fn lrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_prints_published_count() {
    let o = lrc(&["params", "--preset", "lrc-1.5b", "--sharing", "all,all"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0.93B"), "{}", stdout(&o));
    let o = lrc(&["params", "--preset", "lrc-1.5b"]);
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn verify_lemma_suite_exits_zero_and_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.jsonl");
    let o = lrc(&["verify", "--suite", "lemma1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["name", "status", "value", "tol", "ms"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lrc(&["train", "--out", "x", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(lrc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lrc(&["params", "--sharing", "all"]).status.code(), Some(1));
    assert_eq!(lrc(&["verify", "--suite", "nonsense"]).status.code(), Some(1));
    assert_eq!(lrc(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_step_train_writes_header_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = lrc(&["train", "--steps", "0", "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    let ck = load_projection(&run.join("projection.lrck")).unwrap();
    assert_eq!(ck.step, 0);
}

#[test]
fn flags_override_config_file_over_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"alpha": 0.25, "temperature": 8.0}"#).unwrap();
    let run = dir.path().join("run");
    let o = lrc(&["train", "--steps", "0", "--config", s(&cfg), "--alpha", "0.75", "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0));
    let eff: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(eff["alpha"], 0.75);
    assert_eq!(eff["temperature"], 8.0);
    assert_eq!(eff["learning_rate"], 1e-3);

    std::fs::write(&cfg, r#"{"alhpa": 0.25}"#).unwrap();
    let o = lrc(&["train", "--steps", "0", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_corpus_and_deterministic_training() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.tok");
    assert!(lrc(&["gen-corpus", "--kind", "copy", "--size", "5000", "--seed", "2", "--out", s(&corpus)]).status.success());
    let c = load_token_file(&corpus).unwrap();
    assert!(c.num_tokens() >= 5000);

    let flags = |out: &Path| {
        let o = lrc(&[
            "train", "--corpus", s(&corpus), "--steps", "6", "--seq-len", "16", "--batch-tokens", "32",
            "--clone-mask", "gate,up", "--clone-layers", "0b0101", "--sharing", "io,all", "--clip-norm", "none",
            "--seed", "4", "--out", s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let a = flags(&dir.path().join("a"));
    let b = flags(&dir.path().join("b"));
    assert_eq!(a.lines().count(), 7);
    // wall time is the only column allowed to differ
    let strip = |t: &str| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.lrck");
    assert!(lrc(&["gen-teacher", "--out", s(&t), "--seed", "1"]).status.success());
    assert!(lrc(&["eval", "--checkpoint", s(&t)]).status.success());
    let mut bytes = std::fs::read(&t).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0x10;
    std::fs::write(&t, bytes).unwrap();
    let o = lrc(&["eval", "--checkpoint", s(&t)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}
