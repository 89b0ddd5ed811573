use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn homewire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homewire")).args(args).output().expect("binary runs")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const NODES: &str = r#""nodes": [{"address": 1, "appliances": [{"id": 1, "kind": "LIGHT"}]}]"#;

#[test]
fn run_passing_scenario_exits_zero_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let out = homewire(&["run", scenario("handshake.json").to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["registry"], serde_json::json!([1, 2]));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.lines().any(|l| l.contains("\"ftype\":\"INIT\"")));
}

#[test]
fn run_failed_assert_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "s.json",
        &format!(
            r#"{{"name": "bad", "seed": 1, "duration_ms": 600, {NODES},
                "script": [{{"at_ms": 600, "action": "assert", "check": "registry", "nodes": []}}]}}"#
        ),
    );
    let out = homewire(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_invalid_scenario_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "s.json",
        &format!(
            r#"{{"name": "bad", "seed": 1, "duration_ms": 600, {NODES},
                "script": [{{"at_ms": 0, "action": "manual_command", "node": 7, "appliance": 1, "opcode": 1, "value": 0}}]}}"#
        ),
    );
    assert_eq!(homewire(&["run", path.to_str().unwrap()]).status.code(), Some(2));
    let broken = write(dir.path(), "broken.json", "{");
    assert_eq!(homewire(&["run", broken.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn frame_decode_prints_fields_and_rejects_corruption() {
    let ok = homewire(&["frame", "decode", "A5010100FF00002E82"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("INIT"), "{text}");
    let bad = homewire(&["frame", "decode", "A5010100FF00002E83"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn replay_check_compares_traces() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for t in [&a, &b] {
        let out = homewire(&["run", scenario("two_node_demo.json").to_str().unwrap(), "--trace", t.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(homewire(&["replay-check", a.to_str().unwrap(), b.to_str().unwrap()]).status.code(), Some(0));
    let c = write(dir.path(), "c.jsonl", "{\"t\":0,\"ev\":\"other\"}\n");
    assert_ne!(homewire(&["replay-check", a.to_str().unwrap(), c.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn parse_prints_processing_trace() {
    let out = homewire(&["parse", "Turn on the bedroom light at 70%"]);
    assert_eq!(out.status.code(), Some(0));
    let trace: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(trace["path"], "NLP");
    assert_eq!(trace["words"][0]["value"], 70);
}
