use std::collections::BTreeMap;

use serde::Serialize;

use crate::event::Event;
use crate::flow::{AgentConfig, FlowDefinition, MasteryRule, Source, Step};
use crate::gateway::PromptBundle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingInput { slot_id: String, step_id: String },
    AwaitingAgent { agent_id: String, step_id: String },
    Completed,
    EndedByInstructor,
}

impl SessionStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionStatus::Completed | SessionStatus::EndedByInstructor)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SessionStatus::Running => "running",
            SessionStatus::AwaitingInput { .. } => "awaiting_input",
            SessionStatus::AwaitingAgent { .. } => "awaiting_agent",
            SessionStatus::Completed => "completed",
            SessionStatus::EndedByInstructor => "ended_by_instructor",
        }
    }
}

/// Runtime counter for one repetition range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoopFrame {
    pub range: (String, String),
    pub count: u32,
    /// 0-based; always below `count`.
    pub iteration: u32,
    pub correct_streak: u32,
    pub exit: Option<MasteryRule>,
    /// Plan index of the first body step.
    pub(crate) first: usize,
    /// Plan index of the repetition step.
    pub(crate) repetition: usize,
}

impl LoopFrame {
    pub(crate) fn contains(&self, index: usize) -> bool {
        (self.first..=self.repetition).contains(&index)
    }

    pub(crate) fn mastered(&self) -> bool {
        self.exit
            .is_some_and(|rule| self.correct_streak >= rule.consecutive_correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingInvocation {
    pub invocation_id: String,
    pub agent_id: String,
    pub prompt_bundle: PromptBundle,
    pub triggering_step_id: String,
    pub grade: bool,
    /// Instruction text to record once the agent answers (instruction_ai triggers only).
    pub instruction: Option<String>,
    pub dispatched: bool,
    /// Set once the agent answered but no `ai_response` step has delivered it yet.
    pub response: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub correct: u32,
    pub total_graded: u32,
}

/// One executable step of a session, after alternatives were resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanOp {
    pub step: Step,
    /// Index of the enclosing top-level step.
    pub top: usize,
    /// Set for steps that came from an alternative.
    pub alternative_slot: Option<String>,
}

/// Live execution state of one session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub session_id: String,
    pub flow: FlowDefinition,
    pub sources: BTreeMap<String, Source>,
    pub plan: Vec<PlanOp>,
    pub cursor: usize,
    pub loop_frames: Vec<LoopFrame>,
    pub bindings: BTreeMap<String, String>,
    pub pending_invocation: Option<PendingInvocation>,
    pub tallies: BTreeMap<String, Tally>,
    pub status: SessionStatus,
    /// Agent configurations as modified by agent_prompt and reference_materials steps.
    pub agents: BTreeMap<String, AgentConfig>,
    pub history: Vec<Event>,
    pub last_response: Option<String>,
    pub active_respondent: Option<String>,
    pub(crate) next_seq: u64,
}

impl SessionState {
    pub fn current_op(&self) -> Option<&PlanOp> {
        self.plan.get(self.cursor)
    }

    /// Id of the step under the cursor, if any.
    pub fn current_step_id(&self) -> Option<&str> {
        self.current_op().map(|op| op.step.id.as_str())
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn active_frame(&self) -> Option<&LoopFrame> {
        self.loop_frames.last()
    }

    pub fn instructor_id(&self) -> &str {
        self.flow.instructor_id()
    }

    /// Plan index of the first op of a top-level step (or the plan length).
    pub(crate) fn entry_of(&self, top: usize) -> usize {
        self.plan
            .iter()
            .position(|op| op.top >= top)
            .unwrap_or(self.plan.len())
    }

    pub(crate) fn current_iteration(&self) -> u32 {
        match self.loop_frames.last() {
            Some(frame) if frame.contains(self.cursor) => frame.iteration,
            _ => 0,
        }
    }
}
