//! Runs a session to completion against a provider and an input source.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineAction, EngineError, SessionState};
use crate::event::Event;
use crate::gateway::{Provider, ProviderError};
use crate::log::{EventLog, LogError};

/// One scripted human turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputEntry {
    pub slot: String,
    pub content: String,
}

/// Supplies human turns. Returns the submitting slot and the text.
pub trait InputSource {
    fn next_input(&mut self, slot_id: &str, step_id: &str, max_words: Option<u32>) -> Option<(String, String)>;
}

/// Inputs consumed in the order the engine awaits them.
#[derive(Debug, Clone, Default)]
pub struct ScriptedInputs {
    entries: VecDeque<InputEntry>,
}

impl ScriptedInputs {
    pub fn new(entries: Vec<InputEntry>) -> Self {
        Self {
            entries: entries.into(),
        }
    }

    /// Parses the JSON array `[{slot, content}]`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    /// Every input from the same slot.
    pub fn repeated(slot: &str, contents: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self::new(
            contents
                .into_iter()
                .map(|c| InputEntry {
                    slot: slot.to_string(),
                    content: c.into(),
                })
                .collect(),
        )
    }

    pub fn remaining(&self) -> usize {
        self.entries.len()
    }
}

impl InputSource for ScriptedInputs {
    fn next_input(&mut self, _slot_id: &str, _step_id: &str, _max_words: Option<u32>) -> Option<(String, String)> {
        self.entries.pop_front().map(|e| (e.slot, e.content))
    }
}

#[derive(Debug, Error)]
pub enum DriveError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("agent `{agent_id}` failed: {source}")]
    Provider { agent_id: String, source: ProviderError },
    #[error("no input available for `{slot_id}` at step `{step_id}`")]
    InputStarved { slot_id: String, step_id: String },
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Observers of a running session.
pub trait DriveHooks {
    fn on_event(&mut self, _event: &Event) -> Result<(), DriveError> {
        Ok(())
    }

    fn on_action(&mut self, _action: &EngineAction) {}

    /// Whether [`DriveHooks::on_checkpoint`] should be called.
    fn wants_checkpoints(&self) -> bool {
        false
    }

    /// A state a replay of the events so far must reproduce.
    fn on_checkpoint(&mut self, _state: &SessionState) {}
}

/// Hooks that do nothing.
pub struct NoHooks;

impl DriveHooks for NoHooks {}

/// Steps the session until it completes, ends, or a stimulus is missing.
pub fn drive(
    engine: &Engine,
    state: &mut SessionState,
    provider: &dyn Provider,
    inputs: &mut dyn InputSource,
    hooks: &mut dyn DriveHooks,
) -> Result<(), DriveError> {
    loop {
        if state.status.is_terminal() {
            if hooks.wants_checkpoints() {
                hooks.on_checkpoint(state);
            }
            return Ok(());
        }
        let before = hooks.wants_checkpoints().then(|| state.clone());
        let action = engine.next_action(state)?;
        hooks.on_action(&action);
        match (&action, before) {
            (EngineAction::Deliver { .. }, Some(before)) => hooks.on_checkpoint(&before),
            (EngineAction::Deliver { .. }, None) => {}
            _ if hooks.wants_checkpoints() => hooks.on_checkpoint(state),
            _ => {}
        }
        let events = match action {
            EngineAction::Deliver { event } => vec![event],
            EngineAction::AwaitInput {
                slot_id,
                step_id,
                max_words,
            } => {
                let (slot, content) = inputs
                    .next_input(&slot_id, &step_id, max_words)
                    .ok_or(DriveError::InputStarved { slot_id, step_id })?;
                engine.submit_input(state, &slot, &content)?
            }
            EngineAction::InvokeAgent {
                agent_id,
                invocation_id,
                prompt_bundle,
                ..
            } => {
                let text = provider
                    .generate(&invocation_id, &prompt_bundle)
                    .map_err(|source| DriveError::Provider {
                        agent_id: agent_id.clone(),
                        source,
                    })?;
                engine.apply_agent_response(state, &agent_id, &text)?
            }
            EngineAction::Complete => return Ok(()),
        };
        for event in &events {
            hooks.on_event(event)?;
        }
    }
}

impl DriveHooks for EventLog {
    fn on_event(&mut self, event: &Event) -> Result<(), DriveError> {
        self.append(event)?;
        Ok(())
    }
}

/// Collects events and, optionally, checkpoints.
#[derive(Default)]
pub struct Recorder {
    pub events: Vec<Event>,
    pub actions: Vec<EngineAction>,
    pub checkpoints: Option<Vec<SessionState>>,
}

impl Recorder {
    pub fn with_checkpoints() -> Self {
        Self {
            checkpoints: Some(Vec::new()),
            ..Self::default()
        }
    }
}

impl DriveHooks for Recorder {
    fn on_event(&mut self, event: &Event) -> Result<(), DriveError> {
        self.events.push(event.clone());
        Ok(())
    }

    fn on_action(&mut self, action: &EngineAction) {
        self.actions.push(action.clone());
    }

    fn wants_checkpoints(&self) -> bool {
        self.checkpoints.is_some()
    }

    fn on_checkpoint(&mut self, state: &SessionState) {
        if let Some(c) = self.checkpoints.as_mut() {
            c.push(state.clone());
        }
    }
}
