//! The session engine: a deterministic state machine over a validated flow.

mod state;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::content::ContentStore;
use crate::event::{Clock, Event, EventKind, SystemClock, ENGINE_SENDER};
use crate::flow::{
    agent_target, validate_flow, FlowDefinition, Role, Source, Step, StepKind, ValidationReport, Visibility,
};
use crate::gateway::{assemble_prompt, GatewayError, Message, Origin, PromptBundle};
use crate::text::{interpolate, neutralize_braces, normalize_tokens, word_count, InterpolateError};

pub use state::{LoopFrame, PendingInvocation, PlanOp, SessionState, SessionStatus, Tally};

/// Appended to graded instructions so the agent leads with a verdict.
pub const GRADING_DIRECTIVE: &str = "Begin your reply with CORRECT or INCORRECT.";

/// Content of an instructor advance without text.
pub const DEFAULT_ADVANCE_TEXT: &str = "[advanced by instructor]";

/// Chunks retrieved per invocation.
pub const DEFAULT_RETRIEVAL_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EngineAction {
    AwaitInput {
        slot_id: String,
        step_id: String,
        max_words: Option<u32>,
    },
    InvokeAgent {
        agent_id: String,
        invocation_id: String,
        prompt_bundle: PromptBundle,
        step_id: String,
    },
    Deliver {
        event: Event,
    },
    Complete,
}

/// Instructor interventions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlAction {
    /// Answer the awaited input on the learner's behalf.
    Advance { text: Option<String> },
    SkipStep,
    /// Replace the pending agent invocation's result.
    OverrideResponse { text: String },
    End,
}

impl ControlAction {
    pub fn name(&self) -> &'static str {
        match self {
            ControlAction::Advance { .. } => "advance",
            ControlAction::SkipStep => "skip_step",
            ControlAction::OverrideResponse { .. } => "override_response",
            ControlAction::End => "end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("flow is invalid:\n{0}")]
    InvalidFlow(ValidationReport),
    #[error("slot `{0}` cannot be toggled")]
    IllegalToggle(String),
    #[error("session is blocked ({0}); submit the awaited stimulus first")]
    InternalBlocked(&'static str),
    #[error("session has ended")]
    SessionEnded,
    #[error("it is not `{0}`'s turn")]
    NotYourTurn(String),
    #[error("input has {actual} words; the limit is {limit}")]
    WordLimitExceeded { limit: u32, actual: usize },
    #[error("no agent invocation is pending")]
    NoPendingInvocation,
    #[error("expected a response from `{expected}`, got `{actual}`")]
    AgentMismatch { expected: String, actual: String },
    #[error("branch `{0}` has no agent response to inspect")]
    NoResponseInScope(String),
    #[error("branch `{step}` targets unknown step `{target}`")]
    UnknownTarget { step: String, target: String },
    #[error("ai_response `{0}` has no completed invocation")]
    UnpairedResponse(String),
    #[error("step `{step}`: unbound runtime placeholder `{name}`")]
    UnboundRuntimePlaceholder { step: String, name: String },
    #[error("step `{step}`: {source}")]
    Prompt { step: String, source: GatewayError },
    #[error("{action} is not applicable while {status}")]
    Inapplicable { action: &'static str, status: &'static str },
}

/// Outcome of a branch test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchOutcome {
    Jump(String),
    Continue,
}

/// Whole-response token containment, case-insensitive and punctuation-stripped.
pub fn evaluate_branch(contains_token: &str, goto: &str, latest: &str) -> BranchOutcome {
    let wanted: String = normalize_tokens(contains_token).concat();
    if !wanted.is_empty() && normalize_tokens(latest).contains(&wanted) {
        BranchOutcome::Jump(goto.to_string())
    } else {
        BranchOutcome::Continue
    }
}

/// Reads a CORRECT/INCORRECT verdict from the first token.
pub fn parse_grade(response: &str) -> Option<bool> {
    let first = response.split_whitespace().next()?;
    let token: String = first.chars().filter(|c| c.is_alphanumeric()).collect();
    match token.to_ascii_uppercase().as_str() {
        "CORRECT" => Some(true),
        "INCORRECT" => Some(false),
        _ => None,
    }
}

pub struct Engine {
    store: Arc<ContentStore>,
    clock: Arc<dyn Clock>,
    retrieval_k: usize,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(Arc::new(ContentStore::new()), Arc::new(SystemClock))
    }
}

impl Engine {
    pub fn new(store: Arc<ContentStore>, clock: Arc<dyn Clock>) -> Self {
        Self {
            store,
            clock,
            retrieval_k: DEFAULT_RETRIEVAL_K,
        }
    }

    pub fn with_retrieval_k(mut self, k: usize) -> Self {
        self.retrieval_k = k;
        self
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn start_session(
        &self,
        session_id: &str,
        flow: FlowDefinition,
        overrides: &BTreeMap<String, Source>,
    ) -> Result<SessionState, EngineError> {
        let report = validate_flow(&flow);
        if !report.ok {
            return Err(EngineError::InvalidFlow(report));
        }
        check_overrides(&flow, overrides)?;

        let sources: BTreeMap<String, Source> = flow
            .roster
            .iter()
            .map(|s| {
                let source = overrides.get(&s.slot_id).copied().unwrap_or(s.effective_source());
                (s.slot_id.clone(), source)
            })
            .collect();
        let plan = compile_plan(&flow, &sources);
        let agents = flow.agents.iter().map(|a| (a.agent_id.clone(), a.clone())).collect();
        let mut state = SessionState {
            session_id: session_id.to_string(),
            flow,
            sources,
            plan,
            cursor: 0,
            loop_frames: Vec::new(),
            bindings: BTreeMap::new(),
            pending_invocation: None,
            tallies: BTreeMap::new(),
            status: SessionStatus::Running,
            agents,
            history: Vec::new(),
            last_response: None,
            active_respondent: None,
            next_seq: 1,
        };
        move_to(&mut state, 0);
        settle(&mut state)?;
        Ok(state)
    }

    /// What the session needs next. Deliver actions have already been applied.
    pub fn next_action(&self, state: &mut SessionState) -> Result<EngineAction, EngineError> {
        match state.status {
            SessionStatus::AwaitingInput { .. } | SessionStatus::AwaitingAgent { .. } => {
                return Err(EngineError::InternalBlocked(state.status.name()))
            }
            SessionStatus::EndedByInstructor => return Err(EngineError::SessionEnded),
            SessionStatus::Completed => return Ok(EngineAction::Complete),
            SessionStatus::Running => {}
        }
        settle(state)?;
        if state.status == SessionStatus::Completed {
            return Ok(EngineAction::Complete);
        }
        if let Some(pending) = state.pending_invocation.as_mut() {
            if !pending.dispatched {
                pending.dispatched = true;
                let action = EngineAction::InvokeAgent {
                    agent_id: pending.agent_id.clone(),
                    invocation_id: pending.invocation_id.clone(),
                    prompt_bundle: pending.prompt_bundle.clone(),
                    step_id: pending.triggering_step_id.clone(),
                };
                state.status = SessionStatus::AwaitingAgent {
                    agent_id: pending.agent_id.clone(),
                    step_id: pending.triggering_step_id.clone(),
                };
                return Ok(action);
            }
        }

        let op = state.plan[state.cursor].clone();
        if let Some(slot) = &op.alternative_slot {
            let value = match state.flow.slot(slot).and_then(|s| s.team.as_deref()) {
                Some(team) => format!("{slot} of team {team}"),
                None => slot.clone(),
            };
            state.bindings.insert("role".into(), value);
        }
        let instructor = state.instructor_id().to_string();
        let step_id = op.step.id.clone();
        match &op.step.kind {
            StepKind::AgentPrompt { agent, text } => {
                let text = self.interpolate(state, &step_id, text)?;
                if let Some(config) = state.agents.get_mut(agent) {
                    config.persona_prompt = text.clone();
                }
                let event = emit(&*self.clock, state, &step_id, EventKind::System, &instructor, vec![agent.clone()], vec![], text);
                advance(state);
                Ok(EngineAction::Deliver { event })
            }
            StepKind::ReferenceMaterials {
                agent,
                materials,
                audience,
            } => {
                if let Some(config) = state.agents.get_mut(agent) {
                    for m in materials {
                        if !config.material_refs.contains(m) {
                            config.material_refs.push(m.clone());
                        }
                    }
                }
                let titles: Vec<&str> = materials
                    .iter()
                    .map(|m| self.store.material(m).map(|x| x.title.as_str()).unwrap_or(m))
                    .collect();
                let content = neutralize_braces(&format!("Reference materials: {}", titles.join(", ")));
                let mut recipients = audience.clone();
                recipients.push(agent.clone());
                let event = emit(&*self.clock, state, &step_id, EventKind::System, &instructor, recipients, audience.clone(), content);
                advance(state);
                Ok(EngineAction::Deliver { event })
            }
            StepKind::InstructionLearner { to, text } => {
                let text = self.interpolate(state, &step_id, text)?;
                let event = emit(&*self.clock, state, &step_id, EventKind::Instruction, &instructor, to.clone(), to.clone(), text);
                advance(state);
                Ok(EngineAction::Deliver { event })
            }
            StepKind::InstructionAi { agent, text, grade } => {
                let mut text = self.interpolate(state, &step_id, text)?;
                if *grade {
                    text.push_str("\n\n");
                    text.push_str(GRADING_DIRECTIVE);
                }
                let message = Message::new(Origin::Instructor, instructor.clone(), text.clone());
                let bundle = self.bundle(state, &step_id, agent, message)?;
                let invocation_id = format!("{}:{}:{}", state.session_id, step_id, state.next_seq);
                state.pending_invocation = Some(PendingInvocation {
                    invocation_id: invocation_id.clone(),
                    agent_id: agent.clone(),
                    prompt_bundle: bundle.clone(),
                    triggering_step_id: step_id.clone(),
                    grade: *grade,
                    instruction: Some(text),
                    dispatched: true,
                    response: None,
                });
                state.status = SessionStatus::AwaitingAgent {
                    agent_id: agent.clone(),
                    step_id: step_id.clone(),
                };
                Ok(EngineAction::InvokeAgent {
                    agent_id: agent.clone(),
                    invocation_id,
                    prompt_bundle: bundle,
                    step_id,
                })
            }
            StepKind::UserInput { from, max_words, .. } => {
                state.status = SessionStatus::AwaitingInput {
                    slot_id: from.clone(),
                    step_id: step_id.clone(),
                };
                Ok(EngineAction::AwaitInput {
                    slot_id: from.clone(),
                    step_id,
                    max_words: *max_words,
                })
            }
            StepKind::AiResponse { agent, visibility } => {
                let held = state
                    .pending_invocation
                    .as_ref()
                    .filter(|p| &p.agent_id == agent)
                    .and_then(|p| p.response.clone());
                let Some(content) = held else {
                    return Err(EngineError::UnpairedResponse(step_id));
                };
                state.pending_invocation = None;
                let visible = resolve_visibility(&state.flow, visibility);
                let event = emit(&*self.clock, state, &step_id, EventKind::AgentResponse, agent, visible.clone(), visible, content);
                advance(state);
                Ok(EngineAction::Deliver { event })
            }
            StepKind::Repetition { .. } | StepKind::Branch { .. } | StepKind::Alternative { .. } => {
                unreachable!("silent steps are consumed by settle")
            }
        }
    }

    /// Records the awaited human input.
    pub fn submit_input(&self, state: &mut SessionState, slot_id: &str, content: &str) -> Result<Vec<Event>, EngineError> {
        match &state.status {
            SessionStatus::AwaitingInput { slot_id: awaited, .. } if awaited == slot_id => {}
            SessionStatus::EndedByInstructor => return Err(EngineError::SessionEnded),
            _ => return Err(EngineError::NotYourTurn(slot_id.to_string())),
        }
        if let StepKind::UserInput {
            max_words: Some(limit), ..
        } = &state.plan[state.cursor].step.kind
        {
            let actual = word_count(content);
            if actual > *limit as usize {
                return Err(EngineError::WordLimitExceeded { limit: *limit, actual });
            }
        }
        self.record_input(state, slot_id, content)
    }

    fn record_input(&self, state: &mut SessionState, sender: &str, content: &str) -> Result<Vec<Event>, EngineError> {
        let op = state.plan[state.cursor].clone();
        let StepKind::UserInput { from, to, .. } = &op.step.kind else {
            unreachable!("awaiting input outside a user_input step");
        };
        let content = neutralize_braces(content);
        let instructor = state.instructor_id().to_string();

        let trigger = to.iter().find_map(|slot| agent_target(&state.flow, slot)).map(str::to_string);
        let pending = match &trigger {
            Some(agent) => {
                let origin = if sender == instructor { Origin::Instructor } else { Origin::Learner };
                let message = Message::new(origin, sender, content.clone());
                let bundle = self.bundle(state, &op.step.id, agent, message)?;
                Some(PendingInvocation {
                    invocation_id: format!("{}:{}:{}", state.session_id, op.step.id, state.next_seq),
                    agent_id: agent.clone(),
                    prompt_bundle: bundle,
                    triggering_step_id: op.step.id.clone(),
                    grade: false,
                    instruction: None,
                    dispatched: false,
                    response: None,
                })
            }
            None => None,
        };

        let mut visibility = to.clone();
        visibility.push(sender.to_string());
        let event = emit(&*self.clock, state, &op.step.id, EventKind::UserInput, sender, to.clone(), visibility, content.clone());
        state.bindings.insert(format!("input:{}", op.step.id), content);
        state.active_respondent = Some(from.clone());
        state.status = SessionStatus::Running;
        if pending.is_some() {
            // The cursor stays on the trigger until the agent answers.
            state.pending_invocation = pending;
        } else {
            advance(state);
        }
        Ok(vec![event])
    }

    /// Completes the pending invocation with the agent's text.
    pub fn apply_agent_response(
        &self,
        state: &mut SessionState,
        agent_id: &str,
        content: &str,
    ) -> Result<Vec<Event>, EngineError> {
        let expected = match &state.status {
            SessionStatus::AwaitingAgent { agent_id, .. } => agent_id.clone(),
            SessionStatus::EndedByInstructor => return Err(EngineError::SessionEnded),
            _ => return Err(EngineError::NoPendingInvocation),
        };
        if expected != agent_id {
            return Err(EngineError::AgentMismatch {
                expected,
                actual: agent_id.to_string(),
            });
        }
        let mut pending = state.pending_invocation.take().ok_or(EngineError::NoPendingInvocation)?;
        let content = neutralize_braces(content);
        let instructor = state.instructor_id().to_string();
        let trigger_step = pending.triggering_step_id.clone();
        let mut events = Vec::new();

        if let Some(instruction) = pending.instruction.take() {
            events.push(emit(
                &*self.clock,
                state,
                &trigger_step,
                EventKind::Instruction,
                &instructor,
                vec![agent_id.to_string()],
                vec![],
                instruction,
            ));
        }

        let warning = if pending.grade { self.grade(state, &content) } else { None };

        move_to(state, state.cursor + 1);
        let paired = matches!(
            state.current_op().map(|op| &op.step.kind),
            Some(StepKind::AiResponse { agent, .. }) if agent == agent_id
        );
        if paired {
            let op = state.plan[state.cursor].clone();
            let StepKind::AiResponse { visibility, .. } = &op.step.kind else { unreachable!() };
            let visible = resolve_visibility(&state.flow, visibility);
            events.push(emit(
                &*self.clock,
                state,
                &op.step.id,
                EventKind::AgentResponse,
                agent_id,
                visible.clone(),
                visible,
                content.clone(),
            ));
            move_to(state, state.cursor + 1);
        } else {
            events.push(emit(
                &*self.clock,
                state,
                &trigger_step,
                EventKind::AgentResponse,
                agent_id,
                vec![],
                vec![],
                content.clone(),
            ));
            pending.response = Some(content.clone());
            state.pending_invocation = Some(pending);
        }
        if let Some(text) = warning {
            events.push(emit(&*self.clock, state, &trigger_step, EventKind::System, ENGINE_SENDER, vec![], vec![], text));
        }
        state.last_response = Some(content);
        state.status = SessionStatus::Running;
        let _ = settle(state);
        Ok(events)
    }

    /// Applies an instructor intervention.
    pub fn control(&self, state: &mut SessionState, action: &ControlAction) -> Result<Vec<Event>, EngineError> {
        let inapplicable = EngineError::Inapplicable {
            action: action.name(),
            status: state.status.name(),
        };
        if state.status.is_terminal() {
            return Err(inapplicable);
        }
        let instructor = state.instructor_id().to_string();
        match action {
            ControlAction::Advance { text } => {
                if !matches!(state.status, SessionStatus::AwaitingInput { .. }) {
                    return Err(inapplicable);
                }
                let text = text.as_deref().unwrap_or(DEFAULT_ADVANCE_TEXT);
                self.record_input(state, &instructor, text)
            }
            ControlAction::OverrideResponse { text } => {
                let SessionStatus::AwaitingAgent { agent_id, .. } = state.status.clone() else {
                    return Err(inapplicable);
                };
                let mut events = vec![control_record(&*self.clock, state, action)];
                events.extend(self.apply_agent_response(state, &agent_id, text)?);
                Ok(events)
            }
            ControlAction::SkipStep => {
                let event = control_record(&*self.clock, state, action);
                let current = state.current_op().map(|op| op.step.kind.clone());
                let in_flight = state.pending_invocation.as_ref().is_some_and(|p| p.response.is_none());
                if in_flight || matches!(current, Some(StepKind::AiResponse { .. })) {
                    state.pending_invocation = None;
                }
                let trigger_agent = match &current {
                    Some(StepKind::InstructionAi { agent, .. }) => Some(agent.clone()),
                    Some(StepKind::UserInput { to, .. }) => {
                        to.iter().find_map(|s| agent_target(&state.flow, s)).map(str::to_string)
                    }
                    _ => None,
                };
                move_to(state, state.cursor + 1);
                if let Some(agent) = trigger_agent {
                    let paired = matches!(
                        state.current_op().map(|op| &op.step.kind),
                        Some(StepKind::AiResponse { agent: a, .. }) if *a == agent
                    );
                    if paired {
                        move_to(state, state.cursor + 1);
                    }
                }
                state.status = SessionStatus::Running;
                let _ = settle(state);
                Ok(vec![event])
            }
            ControlAction::End => {
                let event = control_record(&*self.clock, state, action);
                state.pending_invocation = None;
                state.status = SessionStatus::EndedByInstructor;
                Ok(vec![event])
            }
        }
    }

    fn interpolate(&self, state: &SessionState, step_id: &str, text: &str) -> Result<String, EngineError> {
        interpolate(text, &state.bindings).map_err(|e| match e {
            InterpolateError::UnboundRuntimePlaceholder(name) => EngineError::UnboundRuntimePlaceholder {
                step: step_id.to_string(),
                name,
            },
            InterpolateError::Placeholder(p) => EngineError::UnboundRuntimePlaceholder {
                step: step_id.to_string(),
                name: p.to_string(),
            },
        })
    }

    fn bundle(&self, state: &SessionState, step_id: &str, agent_id: &str, message: Message) -> Result<PromptBundle, EngineError> {
        let config = state
            .agents
            .get(agent_id)
            .cloned()
            .unwrap_or_else(|| crate::flow::AgentConfig::new(agent_id));
        let retrieved: Vec<String> = self
            .store
            .retrieve_from(&config.material_refs, &message.text, self.retrieval_k)
            .iter()
            .filter_map(|hit| self.store.chunk_text(&hit.material_id, hit.chunk).map(str::to_string))
            .collect();
        assemble_prompt(&config, state.instructor_id(), &state.history, message, &retrieved).map_err(|source| {
            EngineError::Prompt {
                step: step_id.to_string(),
                source,
            }
        })
    }

    /// Updates tallies for a graded response; returns a warning for unreadable verdicts.
    fn grade(&self, state: &mut SessionState, content: &str) -> Option<String> {
        let respondent = state
            .active_respondent
            .clone()
            .or_else(|| {
                state
                    .flow
                    .roster
                    .iter()
                    .find(|s| s.role == Role::Learner)
                    .map(|s| s.slot_id.clone())
            })
            .unwrap_or_else(|| state.instructor_id().to_string());
        let verdict = parse_grade(content);
        let tally = state.tallies.entry(respondent).or_default();
        tally.total_graded += 1;
        if verdict == Some(true) {
            tally.correct += 1;
        }
        let score = format!("{} out of {}", tally.correct, tally.total_graded);
        state.bindings.insert("score".into(), score);
        let cursor = state.cursor;
        if let Some(frame) = state.loop_frames.last_mut().filter(|f| f.contains(cursor)) {
            if verdict == Some(true) {
                frame.correct_streak += 1;
            } else {
                frame.correct_streak = 0;
            }
        }
        match verdict {
            Some(_) => None,
            None => Some("graded response did not begin with CORRECT or INCORRECT; counted as not correct".into()),
        }
    }
}

fn check_overrides(flow: &FlowDefinition, overrides: &BTreeMap<String, Source>) -> Result<(), EngineError> {
    let toggles = flow.toggle_slots();
    for (slot_id, source) in overrides {
        let illegal = || EngineError::IllegalToggle(slot_id.clone());
        let slot = flow.slot(slot_id).ok_or_else(illegal)?;
        if slot.role != Role::Learner || !toggles.contains(&slot_id.as_str()) {
            return Err(illegal());
        }
        if *source == Source::Ai {
            let speaks_directly = flow
                .steps
                .iter()
                .any(|s| matches!(&s.kind, StepKind::UserInput { from, .. } if from == slot_id));
            if speaks_directly {
                return Err(illegal());
            }
        }
    }
    Ok(())
}

/// Flattens the flow into executable ops, resolving alternatives by source.
fn compile_plan(flow: &FlowDefinition, sources: &BTreeMap<String, Source>) -> Vec<PlanOp> {
    let mut plan = Vec::new();
    for (top, step) in flow.steps.iter().enumerate() {
        let op = |step: &Step, slot: Option<&String>| PlanOp {
            step: step.clone(),
            top,
            alternative_slot: slot.cloned(),
        };
        match &step.kind {
            StepKind::Alternative {
                slot,
                human_variant,
                ai_variant,
            } => {
                if sources.get(slot) == Some(&Source::Ai) {
                    plan.push(op(&ai_variant.0, Some(slot)));
                    plan.push(op(&ai_variant.1, Some(slot)));
                } else {
                    plan.push(op(human_variant, Some(slot)));
                }
            }
            _ => plan.push(op(step, None)),
        }
    }
    plan
}

fn resolve_visibility(flow: &FlowDefinition, visibility: &Visibility) -> Vec<String> {
    match visibility {
        Visibility::All => flow.roster.iter().map(|s| s.slot_id.clone()).collect(),
        Visibility::Slots(slots) => slots.clone(),
    }
}

/// Appends an event to history, adding the instructor to recipients and visibility.
fn emit(
    clock: &dyn Clock,
    state: &mut SessionState,
    step_id: &str,
    kind: EventKind,
    sender: &str,
    mut recipients: Vec<String>,
    mut visibility: Vec<String>,
    content: String,
) -> Event {
    let instructor = state.instructor_id().to_string();
    for list in [&mut recipients, &mut visibility] {
        let mut seen = Vec::with_capacity(list.len() + 1);
        list.retain(|s| {
            if seen.contains(s) {
                false
            } else {
                seen.push(s.clone());
                true
            }
        });
        if !list.contains(&instructor) {
            list.push(instructor.clone());
        }
    }
    let event = Event {
        seq: state.next_seq,
        step_id: step_id.to_string(),
        iteration: state.current_iteration(),
        kind,
        sender: sender.to_string(),
        recipients,
        visibility,
        content: neutralize_braces(&content),
        timestamp: clock.now_rfc3339(),
    };
    state.next_seq += 1;
    state.history.push(event.clone());
    event
}

fn control_record(clock: &dyn Clock, state: &mut SessionState, action: &ControlAction) -> Event {
    let step_id = state.current_step_id().unwrap_or("-").to_string();
    let instructor = state.instructor_id().to_string();
    let content = format!("[control] {}", action.name());
    emit(clock, state, &step_id, EventKind::System, &instructor, vec![], vec![], content)
}

/// Moves the cursor, popping a frame that is left and pushing one for a range that is entered.
fn move_to(state: &mut SessionState, index: usize) {
    state.cursor = index;
    if let Some(frame) = state.loop_frames.last() {
        if !frame.contains(index) {
            state.loop_frames.pop();
            state.bindings.remove("loop_index");
        }
    }
    if !state.loop_frames.is_empty() {
        return;
    }
    for (first, _, rep) in state.flow.loop_ranges() {
        let start = state.entry_of(first);
        if start != index {
            continue;
        }
        let StepKind::Repetition { range, count, exit } = &state.flow.steps[rep].kind else {
            continue;
        };
        let frame = LoopFrame {
            range: range.clone(),
            count: count.fixed().unwrap_or(1),
            iteration: 0,
            correct_streak: 0,
            exit: *exit,
            first: start,
            repetition: state.entry_of(rep),
        };
        state.loop_frames.push(frame);
        state.bindings.insert("loop_index".into(), "1".into());
        break;
    }
}

fn advance(state: &mut SessionState) {
    move_to(state, state.cursor + 1);
    // A failure here leaves the cursor on the offending step and resurfaces on the next call.
    let _ = settle(state);
}

/// Runs silent steps (repetition, branch) until a step that needs scheduling.
fn settle(state: &mut SessionState) -> Result<(), EngineError> {
    loop {
        if state.status.is_terminal() {
            return Ok(());
        }
        if state.pending_invocation.as_ref().is_some_and(|p| p.response.is_none()) {
            return Ok(());
        }
        let Some(op) = state.plan.get(state.cursor) else {
            state.status = SessionStatus::Completed;
            return Ok(());
        };
        match &op.step.kind {
            StepKind::Repetition { .. } => {
                let cursor = state.cursor;
                let frame = state
                    .loop_frames
                    .last_mut()
                    .filter(|f| f.repetition == cursor)
                    .expect("repetition step reached without its frame");
                if frame.iteration + 1 >= frame.count || frame.mastered() {
                    move_to(state, cursor + 1);
                } else {
                    frame.iteration += 1;
                    let (first, iteration) = (frame.first, frame.iteration);
                    state.bindings.insert("loop_index".into(), (iteration + 1).to_string());
                    state.cursor = first;
                }
            }
            StepKind::Branch { contains_token, goto } => {
                let step_id = op.step.id.clone();
                let latest = state
                    .last_response
                    .as_deref()
                    .ok_or_else(|| EngineError::NoResponseInScope(step_id.clone()))?;
                match evaluate_branch(contains_token, goto, latest) {
                    BranchOutcome::Jump(target) => {
                        let top = state.flow.step_index(&target).ok_or_else(|| EngineError::UnknownTarget {
                            step: step_id,
                            target: target.clone(),
                        })?;
                        let index = state.entry_of(top);
                        move_to(state, index);
                    }
                    BranchOutcome::Continue => move_to(state, state.cursor + 1),
                }
            }
            _ => return Ok(()),
        }
    }
}
