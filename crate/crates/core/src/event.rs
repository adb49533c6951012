use serde::{Deserialize, Serialize};

/// Sender id used for events the engine itself emits.
pub const ENGINE_SENDER: &str = "engine";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Instruction,
    UserInput,
    AgentResponse,
    System,
}

/// One immutable transcript entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub step_id: String,
    /// 0-based loop iteration; 0 outside loops.
    pub iteration: u32,
    pub kind: EventKind,
    pub sender: String,
    pub recipients: Vec<String>,
    pub visibility: Vec<String>,
    pub content: String,
    pub timestamp: String,
}

impl Event {
    pub fn visible_to(&self, slot: &str) -> bool {
        self.visibility.iter().any(|v| v == slot)
    }

    /// Equality on everything but the timestamp.
    pub fn same_as(&self, other: &Event) -> bool {
        self.seq == other.seq
            && self.step_id == other.step_id
            && self.iteration == other.iteration
            && self.kind == other.kind
            && self.sender == other.sender
            && self.recipients == other.recipients
            && self.visibility == other.visibility
            && self.content == other.content
    }
}

/// Source of event timestamps.
pub trait Clock: Send + Sync {
    fn now_rfc3339(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_rfc3339(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Always reports the same instant.
#[derive(Debug, Clone)]
pub struct FixedClock(pub String);

impl Default for FixedClock {
    fn default() -> Self {
        Self("2025-01-01T00:00:00.000Z".to_string())
    }
}

impl Clock for FixedClock {
    fn now_rfc3339(&self) -> String {
        self.0.clone()
    }
}
