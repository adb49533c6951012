use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const EXEMPLARS: [&str; 5] = [
    "quiz-drill",
    "debate",
    "counseling-simulation",
    "collaborative-research",
    "team-debate-3v3",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_learnflow"))
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn flow_path(name: &str) -> PathBuf {
    manifest_dir().join("../core/flows").join(format!("{name}.json"))
}

fn fixture(name: &str, kind: &str) -> PathBuf {
    manifest_dir().join("tests/fixtures").join(format!("{name}.{kind}.json"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run_exemplar(name: &str, data_dir: &Path, session_id: &str) -> Output {
    let mut cmd = bin();
    cmd.arg("run")
        .arg(flow_path(name))
        .arg("--script")
        .arg(fixture(name, "script"))
        .arg("--inputs")
        .arg(fixture(name, "inputs"))
        .arg("--data-dir")
        .arg(data_dir)
        .args(["--session-id", session_id]);
    if name == "team-debate-3v3" {
        cmd.args(["--toggle", "b1=ai", "--toggle", "b2=ai", "--toggle", "b3=ai"]);
    }
    cmd.output().unwrap()
}

fn log_path(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join("sessions").join(format!("{session_id}.events.jsonl"))
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_ts(records: &[Value]) -> Vec<Value> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.as_object_mut().unwrap().remove("ts");
            r
        })
        .collect()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin().arg("validate").arg(flow_path("quiz-drill")).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));

    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(flow_path("quiz-drill")).unwrap()).unwrap();
    doc["steps"][8]["range"] = serde_json::json!(["8", "4"]);
    let reversed = dir.path().join("reversed.json");
    std::fs::write(&reversed, doc.to_string()).unwrap();
    let bad = bin().arg("validate").arg(&reversed).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("ReversedRange"), "{}", stdout(&bad));

    let missing = bin().arg("validate").arg(dir.path().join("none.json")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{\"id\": ").unwrap();
    assert_eq!(bin().arg("validate").arg(&garbled).output().unwrap().status.code(), Some(2));
}

#[test]
fn exported_examples_validate() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("flows");
    let out = bin().arg("examples").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    for name in EXEMPLARS {
        let path = out_dir.join(format!("{name}.json"));
        let v = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(v.status.code(), Some(0), "{name}: {}", stdout(&v));
    }
    std::fs::write(out_dir.join("quiz-drill.json"), "edited").unwrap();
    let again = bin().arg("examples").arg(&out_dir).output().unwrap();
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(out_dir.join("quiz-drill.json")).unwrap(), "edited");
    let forced = bin().arg("examples").arg(&out_dir).arg("--force").output().unwrap();
    assert_eq!(forced.status.code(), Some(0));
    assert_ne!(std::fs::read_to_string(out_dir.join("quiz-drill.json")).unwrap(), "edited");
}

#[test]
fn exemplar_runs_match_their_golden_transcripts() {
    for name in EXEMPLARS {
        let first = tempfile::tempdir().unwrap();
        let second = tempfile::tempdir().unwrap();
        let id = format!("golden-{name}");
        let a = run_exemplar(name, first.path(), &id);
        let b = run_exemplar(name, second.path(), &id);
        assert_eq!(a.status.code(), Some(0), "{name}: {}", stderr(&a));
        let golden = std::fs::read_to_string(manifest_dir().join("tests/golden").join(format!("{name}.transcript"))).unwrap();
        assert_eq!(stdout(&a), golden, "{name}");
        assert_eq!(stdout(&b), golden, "{name}");
        assert_eq!(
            without_ts(&records(&log_path(first.path(), &id))),
            without_ts(&records(&log_path(second.path(), &id))),
            "{name}"
        );
    }
}

#[test]
fn quiz_log_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_exemplar("quiz-drill", dir.path(), "q").status.code(), Some(0));
    let log = log_path(dir.path(), "q");
    let recs = records(&log);
    let at = |step: &str| recs.iter().filter(|r| r["step_id"] == step).count();
    assert_eq!((at("4"), at("5"), at("6"), at("7"), at("8")), (10, 10, 10, 10, 10));
    assert_eq!(recs.last().unwrap()["step_id"], "11");
    assert_eq!(recs.last().unwrap()["kind"], "agent_response");

    let out = bin().arg("replay").arg(&log).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let headers: Vec<&str> = text.lines().filter(|l| l.starts_with("== iteration")).collect();
    assert_eq!(headers.len(), 10);
    for (i, h) in headers.iter().enumerate() {
        assert!(h.starts_with(&format!("== iteration {} ", i + 1)), "{h}");
    }
    assert!(text.contains("replay verified: 55 events, status completed"));
}

#[test]
fn counseling_branch_leaves_after_third_iteration() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_exemplar("counseling-simulation", dir.path(), "c").status.code(), Some(0));
    let recs = records(&log_path(dir.path(), "c"));
    let body = ["5", "6", "7"];
    let iterations: Vec<u64> = recs
        .iter()
        .filter(|r| r["step_id"] == "5")
        .map(|r| r["iteration"].as_u64().unwrap())
        .collect();
    assert_eq!(iterations, [0, 1, 2]);
    let last_body = recs.iter().rposition(|r| body.contains(&r["step_id"].as_str().unwrap())).unwrap();
    assert_eq!(recs[last_body + 1]["step_id"], "10");
}

#[test]
fn replay_views_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_exemplar("debate", dir.path(), "d").status.code(), Some(0));
    let log = log_path(dir.path(), "d");

    let learner = bin().arg("replay").arg(&log).args(["--as", "learner-1"]).output().unwrap();
    assert_eq!(learner.status.code(), Some(0));
    assert!(!stdout(&learner).contains("[4]"));
    assert!(stdout(&bin().arg("replay").arg(&log).output().unwrap()).contains("[4]"));
    let stranger = bin().arg("replay").arg(&log).args(["--as", "nobody"]).output().unwrap();
    assert_eq!(stranger.status.code(), Some(2));

    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let truncated = dir.path().join("sessions/t.events.jsonl");
    std::fs::write(&truncated, lines[..12].join("\n") + "\n").unwrap();
    std::fs::copy(dir.path().join("sessions/d.session.json"), dir.path().join("sessions/t.session.json")).unwrap();
    let partial = bin().arg("replay").arg(&truncated).output().unwrap();
    assert_eq!(partial.status.code(), Some(0), "{}", stderr(&partial));
    assert!(stdout(&partial).contains("#12 "));
    assert!(!stdout(&partial).contains("#13 "));

    let corrupt = dir.path().join("sessions/x.events.jsonl");
    let mut broken: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    broken[3] = "{\"seq\": 4,".into();
    std::fs::write(&corrupt, broken.join("\n")).unwrap();
    std::fs::copy(dir.path().join("sessions/d.session.json"), dir.path().join("sessions/x.session.json")).unwrap();
    let out = bin().arg("replay").arg(&corrupt).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));

    let edited = dir.path().join("sessions/e.events.jsonl");
    std::fs::write(&edited, text.replacen("Please provide your argument", "Please provide your view", 2)).unwrap();
    std::fs::copy(dir.path().join("sessions/d.session.json"), dir.path().join("sessions/e.session.json")).unwrap();
    let out = bin().arg("replay").arg(&edited).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));

    let orphan_dir = tempfile::tempdir().unwrap();
    let orphan = orphan_dir.path().join("d.events.jsonl");
    std::fs::copy(&log, &orphan).unwrap();
    assert_eq!(bin().arg("replay").arg(&orphan).output().unwrap().status.code(), Some(2));
    let with_flow = bin().arg("replay").arg(&orphan).arg("--flow").arg(flow_path("debate")).output().unwrap();
    assert_eq!(with_flow.status.code(), Some(0), "{}", stderr(&with_flow));
}

#[test]
fn starved_or_failing_runs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let out = bin()
        .arg("run")
        .arg(flow_path("quiz-drill"))
        .arg("--script")
        .arg(fixture("quiz-drill", "script"))
        .arg("--inputs")
        .arg(&empty)
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("no input available for `learner-1`"), "{}", stderr(&out));

    let out = bin()
        .arg("run")
        .arg(flow_path("quiz-drill"))
        .arg("--script")
        .arg(&empty)
        .arg("--inputs")
        .arg(fixture("quiz-drill", "inputs"))
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = bin()
        .arg("run")
        .arg(flow_path("quiz-drill"))
        .args(["--provider", "http", "--base-url", "http://127.0.0.1:9", "--model", "m"])
        .arg("--inputs")
        .arg(fixture("quiz-drill", "inputs"))
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let out = bin().arg("run").arg(flow_path("quiz-drill")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--script"));
}

#[test]
fn terminal_input_is_read_from_stdin() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .arg("run")
        .arg(flow_path("debate"))
        .arg("--script")
        .arg(fixture("debate", "script"))
        .arg("--data-dir")
        .arg(dir.path())
        .args(["--session-id", "tty", "-q"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let long = vec!["word"; 400].join(" ");
    writeln!(stdin, "{long}").unwrap();
    for i in 0..5 {
        writeln!(stdin, "point {i}").unwrap();
    }
    writeln!(stdin, "well done").unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let recs = records(&log_path(dir.path(), "tty"));
    let inputs: Vec<&str> = recs
        .iter()
        .filter(|r| r["kind"] == "user_input")
        .map(|r| r["content"].as_str().unwrap())
        .collect();
    assert_eq!(inputs.len(), 6);
    assert!(inputs[5] == "well done" || inputs[0] == long);
}

#[test]
fn instantiate_fills_a_template() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("cells.json");
    let out = bin()
        .args(["instantiate", "drill"])
        .args(["--bind", "topic=cell biology", "--bind", "persona=You are a patient tutor."])
        .args(["--bind", "n_questions=5", "--bind", "extra=1"])
        .arg("-o")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("`extra`"));
    let v = bin().arg("validate").arg(&out_path).output().unwrap();
    assert_eq!(v.status.code(), Some(0));
    let doc = std::fs::read_to_string(&out_path).unwrap();
    assert!(doc.contains("cell biology") && !doc.contains("{{topic}}"));

    let missing = bin().args(["instantiate", "drill", "--bind", "topic=x"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(bin().args(["instantiate", "nope"]).output().unwrap().status.code(), Some(2));
}

fn http(port: u16, request: &str) -> Option<String> {
    use std::io::{Read, Write};
    let mut stream = std::net::TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.write_all(request.as_bytes()).ok()?;
    let mut response = String::new();
    stream.read_to_string(&mut response).ok()?;
    Some(response)
}

#[test]
fn serve_accepts_flows_and_persists_them() {
    let dir = tempfile::tempdir().unwrap();
    let script = fixture("quiz-drill", "script");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--port", &port.to_string()])
        .arg("--data-dir")
        .arg(dir.path())
        .arg("--script")
        .arg(&script)
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let get = "GET /v1/flows/quiz-drill HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n";
    let mut first = None;
    for _ in 0..200 {
        first = http(port, get);
        if first.is_some() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(25));
    }
    let first = first.expect("server came up");
    assert!(first.starts_with("HTTP/1.1 404"), "{first}");

    let body = std::fs::read_to_string(flow_path("quiz-drill")).unwrap();
    let post = format!(
        "POST /v1/flows HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let created = http(port, &post).unwrap();
    assert!(created.starts_with("HTTP/1.1 201"), "{created}");
    assert!(http(port, get).unwrap().starts_with("HTTP/1.1 200"));
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(dir.path().join("flows/quiz-drill.json").exists());
}
