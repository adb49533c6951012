//! Prompt assembly and the provider boundary.

mod http;
mod stub;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::event::{Event, EventKind};
use crate::flow::AgentConfig;
use crate::text::word_count;

pub use http::{HttpProvider, HttpProviderConfig, API_KEY_ENV};
pub use stub::{ProviderScript, ScriptEntry, StubProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Instructor,
    Learner,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Message {
    pub origin: Origin,
    /// Slot or agent that produced the text.
    pub sender: String,
    pub text: String,
}

impl Message {
    pub fn new(origin: Origin, sender: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            origin,
            sender: sender.into(),
            text: text.into(),
        }
    }
}

/// A fully assembled, provider-ready prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub messages: Vec<Message>,
    pub params: BTreeMap<String, serde_json::Value>,
}

impl PromptBundle {
    pub fn word_count(&self) -> usize {
        word_count(&self.system_text) + self.messages.iter().map(|m| word_count(&m.text)).sum::<usize>()
    }

    pub fn final_message(&self) -> Option<&Message> {
        self.messages.last()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("word budget {budget} is below the {required} words persona and instruction need")]
    BudgetTooSmall { budget: usize, required: usize },
}

/// Builds the prompt for one invocation.
///
/// The system text is the persona followed by as many retrieved chunks as fit.
/// Context messages are the events the agent sent or received, newest kept
/// first; the instruction is always the final message.
pub fn assemble_prompt(
    agent: &AgentConfig,
    instructor_id: &str,
    history: &[Event],
    instruction: Message,
    retrieved: &[String],
) -> Result<PromptBundle, GatewayError> {
    let budget = agent.context_budget_words as usize;
    let required = word_count(&agent.persona_prompt) + word_count(&instruction.text);
    if required > budget {
        return Err(GatewayError::BudgetTooSmall { budget, required });
    }
    let mut used = required;

    let mut system_text = agent.persona_prompt.clone();
    for chunk in retrieved {
        let words = word_count(chunk);
        if used + words > budget {
            break;
        }
        used += words;
        if !system_text.is_empty() {
            system_text.push('\n');
        }
        system_text.push_str(chunk);
    }

    let mut kept = Vec::new();
    for event in history.iter().rev() {
        let Some(message) = context_message(&agent.agent_id, instructor_id, event) else {
            continue;
        };
        let words = word_count(&message.text);
        if used + words > budget {
            break;
        }
        used += words;
        kept.push(message);
    }
    kept.reverse();
    kept.push(instruction);

    Ok(PromptBundle {
        system_text,
        messages: kept,
        params: agent.params.clone(),
    })
}

fn context_message(agent_id: &str, instructor_id: &str, event: &Event) -> Option<Message> {
    if event.kind == EventKind::System {
        return None;
    }
    let involved = event.sender == agent_id || event.recipients.iter().any(|r| r == agent_id);
    if !involved {
        return None;
    }
    let origin = if event.sender == agent_id {
        Origin::Agent
    } else if event.sender == instructor_id || event.kind == EventKind::Instruction {
        Origin::Instructor
    } else {
        Origin::Learner
    };
    Some(Message::new(origin, event.sender.clone(), event.content.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider script exhausted")]
    ScriptExhausted,
    #[error("provider timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("provider returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("provider response malformed: {0}")]
    Malformed(String),
}

/// A generation backend.
pub trait Provider: Send + Sync {
    /// `invocation_id` is stable across retries of the same invocation.
    fn generate(&self, invocation_id: &str, bundle: &PromptBundle) -> Result<String, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn generate(&self, invocation_id: &str, bundle: &PromptBundle) -> Result<String, ProviderError> {
        (**self).generate(invocation_id, bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::EventKind;

    fn agent(persona: &str, budget: u32) -> AgentConfig {
        let mut a = AgentConfig::new("tutor");
        a.persona_prompt = persona.to_string();
        a.context_budget_words = budget;
        a
    }

    fn event(seq: u64, sender: &str, recipients: &[&str], content: String) -> Event {
        Event {
            seq,
            step_id: seq.to_string(),
            iteration: 0,
            kind: if sender == "tutor" { EventKind::AgentResponse } else { EventKind::UserInput },
            sender: sender.into(),
            recipients: recipients.iter().map(|s| s.to_string()).collect(),
            visibility: vec!["instructor".into()],
            content,
            timestamp: String::new(),
        }
    }

    const ROW4: &str = "Generate a multiple-choice question about ecological population control, without revealing the correct answer";

    #[test]
    fn persona_leads_and_instruction_closes() {
        let bundle = assemble_prompt(
            &agent("You are a biology professor.", 4000),
            "instructor",
            &[],
            Message::new(Origin::Instructor, "instructor", ROW4),
            &[],
        )
        .unwrap();
        assert!(bundle.system_text.starts_with("You are a biology professor."));
        assert_eq!(bundle.system_text, "You are a biology professor.");
        assert_eq!(bundle.messages.len(), 1);
        assert_eq!(bundle.final_message().unwrap().text, ROW4);
    }

    #[test]
    fn chunks_follow_persona_on_new_lines() {
        let bundle = assemble_prompt(
            &agent("P.", 100),
            "instructor",
            &[],
            Message::new(Origin::Instructor, "instructor", "go"),
            &["chunk one".into(), "chunk two".into()],
        )
        .unwrap();
        assert_eq!(bundle.system_text, "P.\nchunk one\nchunk two");
    }

    #[test]
    fn budget_too_small() {
        let err = assemble_prompt(
            &agent("one two three", 4),
            "instructor",
            &[],
            Message::new(Origin::Instructor, "instructor", "four five"),
            &[],
        )
        .unwrap_err();
        assert_eq!(err, GatewayError::BudgetTooSmall { budget: 4, required: 5 });
    }

    #[test]
    fn history_is_trimmed_oldest_first() {
        // 50 events of 100 words each: 5000 words of history.
        let history: Vec<Event> = (1..=50)
            .map(|i| {
                let sender = if i % 2 == 0 { "tutor" } else { "learner-1" };
                let words = (0..100).map(|w| format!("e{i}w{w}")).collect::<Vec<_>>().join(" ");
                event(i, sender, &["tutor", "instructor"], words)
            })
            .collect();
        let persona = "You are a biology professor."; // 5 words
        let instruction = "Ask the next question."; // 4 words
        let bundle = assemble_prompt(
            &agent(persona, 4000),
            "instructor",
            &history,
            Message::new(Origin::Instructor, "instructor", instruction),
            &[],
        )
        .unwrap();
        // Oracle: 4000 - 9 = 3991 words left, so 39 whole events fit: seq 12..=50.
        assert_eq!(bundle.word_count(), 9 + 3900);
        assert_eq!(bundle.messages.len(), 40);
        assert!(bundle.messages[0].text.starts_with("e12w0"));
        assert_eq!(bundle.messages[0].origin, Origin::Agent);
        assert_eq!(bundle.messages[1].origin, Origin::Learner);
    }

    #[test]
    fn unrelated_and_system_events_are_excluded() {
        let mut hidden = event(1, "learner-1", &["instructor"], "private".into());
        let mut system = event(2, "tutor", &["instructor"], "sys".into());
        system.kind = EventKind::System;
        hidden.kind = EventKind::UserInput;
        let bundle = assemble_prompt(
            &agent("", 100),
            "instructor",
            &[hidden, system],
            Message::new(Origin::Instructor, "instructor", "go"),
            &[],
        )
        .unwrap();
        assert_eq!(bundle.messages.len(), 1);
    }
}
