use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn cutie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cutie"))
        .args(args)
        .env_remove("CUTIE_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cutie(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["--seed", "3", "synth", "--n", "5", "--out", s(&a)]);
    ok(&["--seed", "3", "synth", "--n", "5", "--out", s(&b)]);
    ok(&["--seed", "4", "synth", "--n", "5", "--out", s(&c)]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(String::from_utf8(read(&a)).unwrap().lines().count(), 5);
}

#[test]
fn param_count_is_near_the_reported_size() {
    let n: f64 = ok(&["param-count"]).trim().parse().unwrap();
    assert!((n - 13.6e6).abs() / 13.6e6 < 0.05, "{n}");
    let wide: u64 = ok(&["param-count", "--embedding-dim", "512"]).trim().parse().unwrap();
    let base: u64 = ok(&["param-count", "--embedding-dim", "256"]).trim().parse().unwrap();
    assert_eq!(wide - base, 6_103_040);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let report = dir.path().join("r.json");
    ok(&["synth", "--n", "6", "--out", s(&data)]);
    let table = ok(&["eval", "--data", s(&data), "--predicted", s(&data), "--json", s(&report)]);
    assert!(table.contains("1.000/1.000"), "{table}");
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mean_ap"], 1.0);
}

#[test]
fn exit_codes_separate_usage_and_runtime_errors() {
    assert_eq!(cutie(&["--help"]).status.code(), Some(0));
    assert_eq!(cutie(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cutie(&["synth"]).status.code(), Some(1));
    let missing = cutie(&["eval", "--data", "/nonexistent/x.jsonl", "--predicted", "/nonexistent/y.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/x.jsonl"));
}

/// Trains a very small model for a few steps and returns (dir, data, checkpoint).
fn tiny_model() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let config = dir.path().join("config.json");
    let out = dir.path().join("run");
    std::fs::write(
        &config,
        r#"{
  "model": {"embedding_dim": 8, "trunk_channels": 8, "shortcut_channels": 8},
  "train": {"batch_size": 2, "checkpoint_interval": 0, "log_interval": 0,
            "grid": {"mean_rows": 24, "mean_cols": 24, "sigma": 0.0, "min": 8, "max": 64}}
}"#,
    )
    .unwrap();
    ok(&["synth", "--n", "4", "--out", s(&data)]);
    let msg = ok(&["--config", s(&config), "train", "--data", s(&data), "--out", s(&out), "--steps", "2"]);
    assert!(msg.contains("step 2"), "{msg}");
    assert!(out.join("vocab.txt").exists());
    (dir, data, out.join("step-2.ckpt"))
}

#[test]
fn train_then_resume_then_infer() {
    let (dir, data, ck) = tiny_model();
    let out = dir.path().join("run");
    let msg = ok(&["train", "--data", s(&data), "--out", s(&out), "--resume", s(&ck), "--steps", "3"]);
    assert!(msg.contains("step 3"), "{msg}");

    let preds = dir.path().join("p.jsonl");
    ok(&["infer", "--checkpoint", s(&out.join("step-3.ckpt")), "--input", s(&data), "--out", s(&preds)]);
    let lines: Vec<Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        assert!(!l["pieces"].as_array().unwrap().is_empty());
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let status = raw.split(' ').nth(1).unwrap().parse().unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    assert!(!head.to_ascii_lowercase().contains("transfer-encoding: chunked"), "{head}");
    (status, serde_json::from_str(payload).unwrap())
}

#[test]
fn server_matches_the_command_line() {
    let (dir, data, ck) = tiny_model();
    let first = std::fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    let single = dir.path().join("one.json");
    std::fs::write(&single, &first).unwrap();
    let cli: Value = serde_json::from_str(&ok(&["infer", "--checkpoint", s(&ck), "--input", s(&single)])).unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_cutie"))
        .args(["serve", "--checkpoint", s(&ck), "--addr", "127.0.0.1:0"])
        .env_remove("CUTIE_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let (status, health) = http(&addr, "GET", "/healthz", "");
    assert_eq!(status, 200);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model"]["classes"].as_array().unwrap().len(), 9);

    let (status, served) = http(&addr, "POST", "/infer", &first);
    assert_eq!(status, 200);
    assert_eq!(served, cli);

    let mut empty: Value = serde_json::from_str(&first).unwrap();
    empty["tokens"] = Value::Array(vec![]);
    assert_eq!(http(&addr, "POST", "/infer", &empty.to_string()).0, 422);
    assert_eq!(http(&addr, "POST", "/infer", "{\"id\": ").0, 400);
    drop(server);
}
