//! Flow documents: the data model instructors author, its JSON encoding,
//! static validation and template instantiation.

mod parse;
mod template;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use parse::{parse_flow, to_document, ParseError};
pub use template::{instantiate_template, TemplateError, TemplateOutcome};
pub(crate) use validate::agent_target;
pub use validate::{validate_flow, Diagnostic, Severity, ValidationReport};

/// Default word budget for an agent's prompt.
pub const DEFAULT_CONTEXT_BUDGET_WORDS: u32 = 4000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowDefinition {
    pub id: String,
    pub title: String,
    pub objectives: Vec<String>,
    pub roster: Vec<ParticipantSlot>,
    pub agents: Vec<AgentConfig>,
    pub steps: Vec<Step>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Instructor,
    Learner,
    AiAgent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Instructor => "instructor",
            Role::Learner => "learner",
            Role::AiAgent => "ai-agent",
        }
    }
}

/// Who produces a slot's turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Ai,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Human => "human",
            Source::Ai => "ai",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantSlot {
    pub slot_id: String,
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub team: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
}

impl ParticipantSlot {
    /// The declared source, or the one implied by the role.
    pub fn effective_source(&self) -> Source {
        self.source.unwrap_or(match self.role {
            Role::AiAgent => Source::Ai,
            _ => Source::Human,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentConfig {
    pub agent_id: String,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub persona_prompt: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub material_refs: Vec<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
    pub context_budget_words: u32,
}

impl AgentConfig {
    pub fn new(agent_id: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            persona_prompt: String::new(),
            material_refs: Vec::new(),
            params: BTreeMap::new(),
            context_budget_words: DEFAULT_CONTEXT_BUDGET_WORDS,
        }
    }
}

/// Who may read an agent response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Visibility {
    All,
    Slots(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasteryRule {
    pub consecutive_correct: u32,
}

/// Loop count; a template may leave it as a placeholder until instantiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Count {
    Fixed(u32),
    Placeholder(String),
}

impl Count {
    pub fn fixed(&self) -> Option<u32> {
        match self {
            Count::Fixed(n) => Some(*n),
            Count::Placeholder(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub id: String,
    pub kind: StepKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    AgentPrompt {
        agent: String,
        text: String,
    },
    ReferenceMaterials {
        agent: String,
        materials: Vec<String>,
        audience: Vec<String>,
    },
    InstructionLearner {
        to: Vec<String>,
        text: String,
    },
    InstructionAi {
        agent: String,
        text: String,
        grade: bool,
    },
    UserInput {
        from: String,
        to: Vec<String>,
        max_words: Option<u32>,
    },
    AiResponse {
        agent: String,
        visibility: Visibility,
    },
    Repetition {
        range: (String, String),
        count: Count,
        exit: Option<MasteryRule>,
    },
    Branch {
        contains_token: String,
        goto: String,
    },
    /// Resolved per session by the slot's source toggle. `human_variant` is a
    /// `UserInput`; `ai_variant` is an `InstructionAi` followed by an `AiResponse`.
    Alternative {
        slot: String,
        human_variant: Box<Step>,
        ai_variant: Box<(Step, Step)>,
    },
}

impl StepKind {
    pub fn name(&self) -> &'static str {
        match self {
            StepKind::AgentPrompt { .. } => "agent_prompt",
            StepKind::ReferenceMaterials { .. } => "reference_materials",
            StepKind::InstructionLearner { .. } => "instruction_learner",
            StepKind::InstructionAi { .. } => "instruction_ai",
            StepKind::UserInput { .. } => "user_input",
            StepKind::AiResponse { .. } => "ai_response",
            StepKind::Repetition { .. } => "repetition",
            StepKind::Branch { .. } => "branch",
            StepKind::Alternative { .. } => "alternative",
        }
    }

    /// Authored text that is interpolated when the step runs.
    pub fn text(&self) -> Option<&str> {
        match self {
            StepKind::AgentPrompt { text, .. }
            | StepKind::InstructionLearner { text, .. }
            | StepKind::InstructionAi { text, .. } => Some(text),
            _ => None,
        }
    }
}

impl Step {
    pub fn new(id: impl Into<String>, kind: StepKind) -> Self {
        Self { id: id.into(), kind }
    }

    /// This step followed by any nested variant steps.
    pub fn leaves(&self) -> Vec<&Step> {
        match &self.kind {
            StepKind::Alternative {
                human_variant,
                ai_variant,
                ..
            } => vec![self, human_variant, &ai_variant.0, &ai_variant.1],
            _ => vec![self],
        }
    }
}

impl FlowDefinition {
    pub fn instructor(&self) -> Option<&ParticipantSlot> {
        self.roster.iter().find(|s| s.role == Role::Instructor)
    }

    /// Slot id of the (single) instructor; empty if the roster has none.
    pub fn instructor_id(&self) -> &str {
        self.instructor().map(|s| s.slot_id.as_str()).unwrap_or("")
    }

    pub fn slot(&self, slot_id: &str) -> Option<&ParticipantSlot> {
        self.roster.iter().find(|s| s.slot_id == slot_id)
    }

    pub fn agent(&self, agent_id: &str) -> Option<&AgentConfig> {
        self.agents.iter().find(|a| a.agent_id == agent_id)
    }

    pub fn step_index(&self, step_id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.id == step_id)
    }

    /// Finds a step by id, including steps nested in alternatives.
    pub fn find_step(&self, step_id: &str) -> Option<&Step> {
        self.steps
            .iter()
            .flat_map(Step::leaves)
            .find(|s| s.id == step_id)
    }

    /// Repetition ranges as `(first index, last index, repetition index)`, for
    /// ranges whose bounds name top-level steps.
    pub fn loop_ranges(&self) -> Vec<(usize, usize, usize)> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(rep, step)| match &step.kind {
                StepKind::Repetition { range, .. } => {
                    let first = self.step_index(&range.0)?;
                    let last = self.step_index(&range.1)?;
                    Some((first, last, rep))
                }
                _ => None,
            })
            .collect()
    }

    /// Slots referenced as the `slot` of an alternative step.
    pub fn toggle_slots(&self) -> Vec<&str> {
        let mut slots: Vec<&str> = self
            .steps
            .iter()
            .filter_map(|s| match &s.kind {
                StepKind::Alternative { slot, .. } => Some(slot.as_str()),
                _ => None,
            })
            .collect();
        slots.sort_unstable();
        slots.dedup();
        slots
    }
}
