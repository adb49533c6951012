//! Append-only JSON-lines event log, replay and per-viewer projection.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ControlAction, Engine, EngineAction, EngineError, SessionState, SessionStatus};
use crate::event::{Event, EventKind};
use crate::flow::{parse_flow, to_document, FlowDefinition, ParseError, Source};

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub seq: u64,
    pub session_id: String,
    pub step_id: String,
    pub iteration: u32,
    pub kind: EventKind,
    pub sender: String,
    pub recipients: Vec<String>,
    pub visibility: Vec<String>,
    pub content: String,
    pub ts: String,
}

impl LogRecord {
    pub fn from_event(session_id: &str, event: &Event) -> Self {
        Self {
            seq: event.seq,
            session_id: session_id.to_string(),
            step_id: event.step_id.clone(),
            iteration: event.iteration,
            kind: event.kind,
            sender: event.sender.clone(),
            recipients: event.recipients.clone(),
            visibility: event.visibility.clone(),
            content: event.content.clone(),
            ts: event.timestamp.clone(),
        }
    }

    pub fn to_event(&self) -> Event {
        Event {
            seq: self.seq,
            step_id: self.step_id.clone(),
            iteration: self.iteration,
            kind: self.kind,
            sender: self.sender.clone(),
            recipients: self.recipients.clone(),
            visibility: self.visibility.clone(),
            content: self.content.clone(),
            timestamp: self.ts.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }

    /// The control action this record stands for, if it is a control record.
    fn control_action(&self) -> Option<&str> {
        if self.kind != EventKind::System {
            return None;
        }
        self.content.strip_prefix("[control] ")
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("expected seq {expected}, got {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("viewer `{0}` is not in the roster")]
    UnknownViewer(String),
    #[error("replay diverged at seq {seq}: {reason}")]
    ReplayMismatch { seq: u64, reason: String },
    #[error("session manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `{data_dir}/sessions/{session_id}.events.jsonl`
pub fn session_log_path(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join("sessions").join(format!("{session_id}.events.jsonl"))
}

/// `{data_dir}/sessions/{session_id}.session.json`
pub fn session_manifest_path(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join("sessions").join(format!("{session_id}.session.json"))
}

/// Durable writer for one session's log.
#[derive(Debug)]
pub struct EventLog {
    session_id: String,
    path: PathBuf,
    file: File,
    last_seq: u64,
}

impl EventLog {
    /// Opens (or creates) the log at `path`, continuing after its last record.
    pub fn open(path: impl Into<PathBuf>, session_id: &str) -> Result<Self, LogError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let last_seq = if path.exists() {
            read_records(&path)?.last().map_or(0, |r| r.seq)
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            session_id: session_id.to_string(),
            path,
            file,
            last_seq,
        })
    }

    pub fn create(data_dir: &Path, session_id: &str) -> Result<Self, LogError> {
        Self::open(session_log_path(data_dir, session_id), session_id)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Writes and syncs one event; its seq must follow the last one.
    pub fn append(&mut self, event: &Event) -> Result<u64, LogError> {
        let expected = self.last_seq + 1;
        if event.seq != expected {
            return Err(LogError::SequenceGap {
                expected,
                found: event.seq,
            });
        }
        let mut line = LogRecord::from_event(&self.session_id, event).to_line();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.last_seq = event.seq;
        Ok(event.seq)
    }
}

/// Parses log text; blank lines are skipped, seqs must run 1, 2, 3...
pub fn parse_records(text: &str) -> Result<Vec<LogRecord>, LogError> {
    let mut records: Vec<LogRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let record: LogRecord = serde_json::from_str(line).map_err(|e| LogError::CorruptRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        let expected = records.last().map_or(1, |r| r.seq + 1);
        if record.seq != expected {
            return Err(LogError::CorruptRecord {
                line: line_no,
                reason: format!("expected seq {expected}, found {}", record.seq),
            });
        }
        if let Some(first) = records.first() {
            if first.session_id != record.session_id {
                return Err(LogError::CorruptRecord {
                    line: line_no,
                    reason: format!("session `{}` in a log of `{}`", record.session_id, first.session_id),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_records(path: &Path) -> Result<Vec<LogRecord>, LogError> {
    parse_records(&std::fs::read_to_string(path)?)
}

/// Events visible to `viewer`.
pub fn project<'a>(
    records: &'a [LogRecord],
    viewer: &str,
    flow: &FlowDefinition,
) -> Result<Vec<&'a LogRecord>, LogError> {
    if flow.slot(viewer).is_none() {
        return Err(LogError::UnknownViewer(viewer.to_string()));
    }
    Ok(records.iter().filter(|r| r.visibility.iter().any(|v| v == viewer)).collect())
}

/// What a session was started with; stored next to its log.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionManifest {
    pub session_id: String,
    pub flow: FlowDefinition,
    pub overrides: BTreeMap<String, Source>,
}

impl SessionManifest {
    pub fn to_json(&self) -> String {
        let flow: serde_json::Value = serde_json::from_str(&to_document(&self.flow)).expect("flow document is JSON");
        let value = serde_json::json!({
            "session_id": self.session_id,
            "flow": flow,
            "overrides": self.overrides,
        });
        serde_json::to_string_pretty(&value).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LogError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            session_id: String,
            flow: serde_json::Value,
            #[serde(default)]
            overrides: BTreeMap<String, Source>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| LogError::Manifest(e.to_string()))?;
        let flow = parse_flow(&raw.flow.to_string()).map_err(|e: ParseError| LogError::Manifest(e.to_string()))?;
        Ok(Self {
            session_id: raw.session_id,
            flow,
            overrides: raw.overrides,
        })
    }

    pub fn write(&self, data_dir: &Path) -> Result<PathBuf, LogError> {
        let path = session_manifest_path(data_dir, &self.session_id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, self.to_json())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, LogError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rebuilds a session by re-running the engine against the recorded stimuli.
///
/// Human inputs, agent responses and control actions are taken from the
/// records; every event the engine emits must match the next record. Once the
/// records run out the session is moved up to its next pending delivery.
pub fn replay(
    engine: &Engine,
    session_id: &str,
    flow: FlowDefinition,
    overrides: &BTreeMap<String, Source>,
    records: &[LogRecord],
) -> Result<SessionState, LogError> {
    let mut state = engine.start_session(session_id, flow, overrides)?;
    let mut i = 0;
    loop {
        let Some(record) = records.get(i) else {
            finish(engine, &mut state)?;
            return Ok(state);
        };
        if record.session_id != session_id {
            return Err(mismatch(record, format!("belongs to session `{}`", record.session_id)));
        }
        let before = state.history.len();

        if let Some(name) = record.control_action() {
            finish(engine, &mut state)?;
            let action = match name {
                "skip_step" => ControlAction::SkipStep,
                "end" => ControlAction::End,
                "override_response" => {
                    let text = records[i + 1..]
                        .iter()
                        .find(|r| r.kind == EventKind::AgentResponse)
                        .map(|r| r.content.clone())
                        .ok_or_else(|| mismatch(record, "override without a response record".into()))?;
                    ControlAction::OverrideResponse { text }
                }
                other => return Err(mismatch(record, format!("unknown control action `{other}`"))),
            };
            engine
                .control(&mut state, &action)
                .map_err(|e| mismatch(record, e.to_string()))?;
        } else {
            match state.status.clone() {
                SessionStatus::Running => {
                    let mut probe = state.clone();
                    let action = engine.next_action(&mut probe)?;
                    if let EngineAction::Complete = action {
                        return Err(mismatch(record, "recorded after the session completed".into()));
                    }
                    state = probe;
                }
                SessionStatus::AwaitingInput { slot_id, .. } => {
                    if record.kind != EventKind::UserInput {
                        return Err(mismatch(record, format!("expected input from `{slot_id}`")));
                    }
                    let instructor = state.instructor_id().to_string();
                    let result = if record.sender == slot_id {
                        engine.submit_input(&mut state, &slot_id, &record.content)
                    } else if record.sender == instructor {
                        engine.control(
                            &mut state,
                            &ControlAction::Advance {
                                text: Some(record.content.clone()),
                            },
                        )
                    } else {
                        return Err(mismatch(record, format!("`{}` answered for `{slot_id}`", record.sender)));
                    };
                    result.map_err(|e| mismatch(record, e.to_string()))?;
                }
                SessionStatus::AwaitingAgent { agent_id, .. } => {
                    let response = records[i..]
                        .iter()
                        .take(2)
                        .find(|r| r.kind == EventKind::AgentResponse && r.sender == agent_id)
                        .ok_or_else(|| mismatch(record, format!("expected a response from `{agent_id}`")))?;
                    engine
                        .apply_agent_response(&mut state, &agent_id, &response.content)
                        .map_err(|e| mismatch(record, e.to_string()))?;
                }
                SessionStatus::Completed | SessionStatus::EndedByInstructor => {
                    return Err(mismatch(record, "recorded after the session finished".into()));
                }
            }
        }

        for k in before..state.history.len() {
            let expected = records
                .get(i)
                .ok_or_else(|| LogError::ReplayMismatch {
                    seq: state.history[k].seq,
                    reason: "engine emitted an event missing from the log".into(),
                })?;
            let actual = &mut state.history[k];
            if !actual.same_as(&expected.to_event()) {
                return Err(mismatch(
                    expected,
                    format!("engine produced {}", serde_json::to_string(&*actual).unwrap_or_default()),
                ));
            }
            actual.timestamp = expected.ts.clone();
            i += 1;
        }
    }
}

/// Advances past actions that emit nothing, stopping before any delivery.
fn finish(engine: &Engine, state: &mut SessionState) -> Result<(), LogError> {
    if state.status != SessionStatus::Running {
        return Ok(());
    }
    let mut probe = state.clone();
    match engine.next_action(&mut probe)? {
        EngineAction::Deliver { .. } => {}
        _ => *state = probe,
    }
    Ok(())
}

fn mismatch(record: &LogRecord, reason: String) -> LogError {
    LogError::ReplayMismatch {
        seq: record.seq,
        reason,
    }
}
