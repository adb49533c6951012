//! One live session: engine state behind a lock, a published event list that
//! readers can copy without it, and the background agent calls.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::http::StatusCode;
use learnflow_core::engine::{Engine, EngineAction, EngineError, SessionState};
use learnflow_core::gateway::{PromptBundle, Provider};
use learnflow_core::log::EventLog;
use learnflow_core::{Event, FlowDefinition};
use serde_json::{json, Value};
use tokio::sync::{watch, Mutex};

/// A stored reply for `request_id` retries.
pub(crate) type Reply = (StatusCode, Value);

/// What feed readers wait on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct Progress {
    pub last_seq: u64,
    pub terminal: bool,
}

pub(crate) struct Inner {
    pub state: SessionState,
    pub log: Option<EventLog>,
    pub replies: HashMap<String, Reply>,
    pub last_error: Option<String>,
}

pub struct Session {
    pub id: String,
    pub flow: Arc<FlowDefinition>,
    /// token -> slot
    tokens: HashMap<String, String>,
    pub(crate) inner: Mutex<Inner>,
    published: RwLock<Vec<Event>>,
    progress: watch::Sender<Progress>,
}

/// An agent call to run outside the session lock.
pub(crate) struct Job {
    agent_id: String,
    invocation_id: String,
    bundle: PromptBundle,
}

impl Session {
    pub(crate) fn new(
        state: SessionState,
        flow: Arc<FlowDefinition>,
        tokens: HashMap<String, String>,
        log: Option<EventLog>,
    ) -> Self {
        let (progress, _) = watch::channel(Progress::default());
        Self {
            id: state.session_id.clone(),
            flow,
            tokens,
            inner: Mutex::new(Inner {
                state,
                log,
                replies: HashMap::new(),
                last_error: None,
            }),
            published: RwLock::new(Vec::new()),
            progress,
        }
    }

    pub fn slot_for(&self, token: &str) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    pub fn tokens(&self) -> &HashMap<String, String> {
        &self.tokens
    }

    pub(crate) fn subscribe(&self) -> watch::Receiver<Progress> {
        self.progress.subscribe()
    }

    /// Published events after `since` that `slot` may read, with the seq the
    /// scan reached.
    pub fn visible_since(&self, slot: &str, since: u64) -> (Vec<Event>, u64) {
        let events = self.published.read().expect("event list lock");
        let start = (since as usize).min(events.len());
        let visible = events[start..].iter().filter(|e| e.visible_to(slot)).cloned().collect();
        (visible, events.len() as u64)
    }

    /// Logs and publishes new events, then wakes feed readers.
    pub(crate) fn publish(&self, inner: &mut Inner, events: &[Event]) {
        if let Some(log) = inner.log.as_mut() {
            for event in events {
                if let Err(e) = log.append(event) {
                    tracing::error!(session = %self.id, "event log append failed: {e}");
                    inner.last_error = Some(e.to_string());
                }
            }
        }
        let last_seq = {
            let mut published = self.published.write().expect("event list lock");
            published.extend(events.iter().cloned());
            published.len() as u64
        };
        let terminal = inner.state.status.is_terminal();
        self.progress.send_replace(Progress { last_seq, terminal });
    }

    /// Runs the engine until it needs a human, an agent, or has finished.
    pub(crate) fn pump(&self, engine: &Engine, inner: &mut Inner) -> Option<Job> {
        loop {
            if inner.state.status.is_terminal() {
                self.publish(inner, &[]);
                return None;
            }
            match engine.next_action(&mut inner.state) {
                Ok(EngineAction::Deliver { event }) => self.publish(inner, &[event]),
                Ok(EngineAction::AwaitInput { .. }) | Err(EngineError::InternalBlocked(_)) => return None,
                Ok(EngineAction::InvokeAgent {
                    agent_id,
                    invocation_id,
                    prompt_bundle,
                    ..
                }) => {
                    return Some(Job {
                        agent_id,
                        invocation_id,
                        bundle: prompt_bundle,
                    })
                }
                Ok(EngineAction::Complete) => {
                    self.publish(inner, &[]);
                    return None;
                }
                Err(e) => {
                    tracing::error!(session = %self.id, "engine stopped: {e}");
                    inner.last_error = Some(e.to_string());
                    return None;
                }
            }
        }
    }

    /// Pumps and dispatches agent calls until the session waits on a human.
    pub(crate) async fn drive(self: Arc<Self>, engine: Arc<Engine>, provider: Arc<dyn Provider>) {
        let mut job = {
            let mut inner = self.inner.lock().await;
            self.pump(&engine, &mut inner)
        };
        while let Some(Job {
            agent_id,
            invocation_id,
            bundle,
        }) = job.take()
        {
            let call_provider = provider.clone();
            let id = invocation_id.clone();
            let result = tokio::task::spawn_blocking(move || call_provider.generate(&id, &bundle)).await;
            let mut inner = self.inner.lock().await;
            let still_pending = inner
                .state
                .pending_invocation
                .as_ref()
                .is_some_and(|p| p.invocation_id == invocation_id && p.response.is_none());
            if !still_pending {
                // The instructor overrode, skipped or ended meanwhile.
                job = self.pump(&engine, &mut inner);
                continue;
            }
            match result {
                Ok(Ok(text)) => match engine.apply_agent_response(&mut inner.state, &agent_id, &text) {
                    Ok(events) => {
                        self.publish(&mut inner, &events);
                        job = self.pump(&engine, &mut inner);
                    }
                    Err(e) => inner.last_error = Some(e.to_string()),
                },
                Ok(Err(e)) => {
                    tracing::warn!(session = %self.id, agent = %agent_id, "provider failed: {e}");
                    inner.last_error = Some(format!("agent `{agent_id}` failed: {e}"));
                }
                Err(e) => inner.last_error = Some(format!("agent task failed: {e}")),
            }
        }
    }

    /// Summary that reveals no event content.
    pub(crate) fn summary(&self, inner: &Inner) -> Value {
        let state = &inner.state;
        json!({
            "session_id": state.session_id,
            "flow_id": self.flow.id,
            "status": state.status,
            "step_id": state.current_step_id(),
            "loop_frames": state.loop_frames,
            "tallies": state.tallies,
            "last_seq": state.last_seq(),
            "last_error": inner.last_error,
        })
    }
}
