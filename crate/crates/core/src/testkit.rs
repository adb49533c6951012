//! Random flows, scripts and inputs for property tests.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::driver::InputSource;
use crate::engine::{ControlAction, Engine, EngineAction, EngineError, SessionState};
use crate::event::Event;
use crate::flow::{
    validate_flow, AgentConfig, Count, FlowDefinition, MasteryRule, ParticipantSlot, Role, Source, Step, StepKind,
    Visibility,
};
use crate::gateway::{PromptBundle, Provider, ProviderError};

/// A generated flow plus the toggles to start it with.
#[derive(Debug, Clone)]
pub struct FuzzCase {
    pub seed: u64,
    pub flow: FlowDefinition,
    pub overrides: BTreeMap<String, Source>,
}

struct Cast {
    plain: Vec<String>,
    toggled: Vec<String>,
    agents: Vec<String>,
    addressable: Vec<String>,
}

impl Cast {
    fn learners(&self) -> Vec<String> {
        self.plain.iter().chain(&self.toggled).cloned().collect()
    }
}

enum Block {
    Steps(Vec<StepKind>),
    Loop {
        body: Vec<Vec<StepKind>>,
        branch_after: Option<usize>,
        count: u32,
        mastery: Option<u32>,
    },
    Branch,
}

/// A random flow; it may or may not validate.
pub fn random_flow(rng: &mut impl Rng, id: &str) -> FlowDefinition {
    let n_plain = rng.random_range(1..=3);
    let n_toggled = rng.random_range(0..=2);
    let n_agents = rng.random_range(1..=3);
    let cast = Cast {
        plain: (1..=n_plain).map(|i| format!("learner-{i}")).collect(),
        toggled: (1..=n_toggled).map(|i| format!("member-{i}")).collect(),
        agents: (1..=n_agents).map(|i| format!("agent-{i}")).collect(),
        addressable: Vec::new(),
    };
    let mut cast = cast;
    cast.addressable = cast.agents.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();

    let mut roster = vec![ParticipantSlot {
        slot_id: "instructor".into(),
        role: Role::Instructor,
        team: None,
        source: None,
    }];
    for l in &cast.plain {
        roster.push(ParticipantSlot {
            slot_id: l.clone(),
            role: Role::Learner,
            team: None,
            source: None,
        });
    }
    for l in &cast.toggled {
        roster.push(ParticipantSlot {
            slot_id: l.clone(),
            role: Role::Learner,
            team: Some("T".into()),
            source: Some(Source::Human),
        });
    }
    for a in &cast.addressable {
        roster.push(ParticipantSlot {
            slot_id: a.clone(),
            role: Role::AiAgent,
            team: None,
            source: None,
        });
    }
    let agents = cast
        .agents
        .iter()
        .map(|a| {
            let mut config = AgentConfig::new(a);
            config.persona_prompt = format!("You are {a}.");
            config
        })
        .collect();

    let n_blocks = rng.random_range(1..=7);
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        let roll = rng.random_range(0..10);
        if roll < 2 {
            let body_len = rng.random_range(1..=3);
            let body: Vec<Vec<StepKind>> = (0..body_len).map(|_| random_block(rng, &cast, true)).collect();
            let triggers: Vec<usize> = body
                .iter()
                .enumerate()
                .filter(|(_, b)| b.iter().any(is_trigger))
                .map(|(i, _)| i)
                .collect();
            let branch_after = if rng.random_bool(0.5) { triggers.choose(rng).copied() } else { None };
            let graded = body
                .iter()
                .flatten()
                .any(|k| matches!(k, StepKind::InstructionAi { grade: true, .. }));
            blocks.push(Block::Loop {
                body,
                branch_after,
                count: rng.random_range(1..=4),
                mastery: (graded && rng.random_bool(0.5)).then(|| rng.random_range(1..=2)),
            });
        } else if roll < 3 {
            blocks.push(Block::Branch);
        } else {
            blocks.push(Block::Steps(random_block(rng, &cast, false)));
        }
    }
    // A trailing step gives branches somewhere to land.
    blocks.push(Block::Steps(vec![StepKind::InstructionLearner {
        to: cast.learners(),
        text: "Thanks for taking part.".into(),
    }]));

    let steps = assemble(rng, blocks);
    FlowDefinition {
        id: id.to_string(),
        title: format!("Fuzz flow {id}"),
        objectives: vec!["exercise the engine".into()],
        roster,
        agents,
        steps,
        templates: None,
    }
}

fn is_trigger(kind: &StepKind) -> bool {
    matches!(kind, StepKind::InstructionAi { .. })
        || matches!(kind, StepKind::UserInput { to, .. } if to.iter().any(|t| t.starts_with("agent-")))
}

fn some_of(rng: &mut impl Rng, items: &[String]) -> Vec<String> {
    items.iter().filter(|_| rng.random_bool(0.5)).cloned().collect()
}

fn random_text(rng: &mut impl Rng, in_loop: bool) -> String {
    let mut text = String::from("Please continue");
    if in_loop && rng.random_bool(0.3) {
        text.push_str(" round {{loop_index}}");
    }
    text.push('.');
    text
}

fn random_visibility(rng: &mut impl Rng, cast: &Cast) -> Visibility {
    if rng.random_bool(0.3) {
        Visibility::All
    } else {
        Visibility::Slots(some_of(rng, &cast.learners()))
    }
}

fn random_block(rng: &mut impl Rng, cast: &Cast, in_loop: bool) -> Vec<StepKind> {
    let agent = cast.agents.choose(rng).unwrap().clone();
    match rng.random_range(0..8) {
        0 => vec![StepKind::InstructionLearner {
            to: some_of(rng, &cast.learners()),
            text: random_text(rng, in_loop),
        }],
        1 => vec![StepKind::AgentPrompt {
            agent,
            text: "You are a patient tutor.".into(),
        }],
        2 => vec![StepKind::ReferenceMaterials {
            agent,
            materials: vec!["notes".into()],
            audience: some_of(rng, &cast.learners()),
        }],
        3 | 4 => {
            let mut kinds = vec![StepKind::InstructionAi {
                agent: agent.clone(),
                text: random_text(rng, in_loop),
                grade: rng.random_bool(0.4),
            }];
            if rng.random_bool(0.8) {
                kinds.push(StepKind::AiResponse {
                    agent,
                    visibility: random_visibility(rng, cast),
                });
            }
            kinds
        }
        5 => {
            let mut senders = cast.plain.clone();
            senders.push("instructor".into());
            vec![StepKind::UserInput {
                from: senders.choose(rng).unwrap().clone(),
                to: vec!["instructor".into()],
                max_words: rng.random_bool(0.5).then(|| rng.random_range(1..=30)),
            }]
        }
        6 if !cast.addressable.is_empty() => {
            let target = cast.addressable.choose(rng).unwrap().clone();
            vec![
                StepKind::UserInput {
                    from: cast.plain.choose(rng).unwrap().clone(),
                    to: vec![target.clone()],
                    max_words: None,
                },
                StepKind::AiResponse {
                    agent: target,
                    visibility: random_visibility(rng, cast),
                },
            ]
        }
        7 if !cast.toggled.is_empty() => {
            let slot = cast.toggled.choose(rng).unwrap().clone();
            vec![StepKind::Alternative {
                slot: slot.clone(),
                human_variant: Box::new(Step::new(
                    "",
                    StepKind::UserInput {
                        from: slot,
                        to: cast.learners(),
                        max_words: Some(rng.random_range(5..=40)),
                    },
                )),
                ai_variant: Box::new((
                    Step::new(
                        "",
                        StepKind::InstructionAi {
                            agent: agent.clone(),
                            text: "Argue as {{role}}.".into(),
                            grade: false,
                        },
                    ),
                    Step::new(
                        "",
                        StepKind::AiResponse {
                            agent,
                            visibility: Visibility::All,
                        },
                    ),
                )),
            }]
        }
        _ => vec![StepKind::InstructionLearner {
            to: cast.plain.clone(),
            text: "Read the prompt carefully.".into(),
        }],
    }
}

/// Appends a step numbered by position; alternatives get `alt-N` and `N-1`/`N-2i`/`N-2` variants.
fn push(steps: &mut Vec<Step>, kind: StepKind) -> usize {
    let n = (steps.len() + 1).to_string();
    let step = match kind {
        StepKind::Alternative {
            slot,
            mut human_variant,
            mut ai_variant,
        } => {
            human_variant.id = format!("{n}-1");
            ai_variant.0.id = format!("{n}-2i");
            ai_variant.1.id = format!("{n}-2");
            Step::new(
                format!("alt-{n}"),
                StepKind::Alternative {
                    slot,
                    human_variant,
                    ai_variant,
                },
            )
        }
        other => Step::new(n, other),
    };
    steps.push(step);
    steps.len() - 1
}

/// Numbers the steps and resolves loop ranges and branch targets.
fn assemble(rng: &mut impl Rng, blocks: Vec<Block>) -> Vec<Step> {
    let mut steps: Vec<Step> = Vec::new();
    // (index of branch step, earliest allowed target index)
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut loop_spans: Vec<(usize, usize)> = Vec::new();

    for block in blocks {
        match block {
            Block::Steps(kinds) => {
                for k in kinds {
                    push(&mut steps, k);
                }
            }
            Block::Branch => {
                let at = push(
                    &mut steps,
                    StepKind::Branch {
                        contains_token: "yes".into(),
                        goto: String::new(),
                    },
                );
                branches.push((at, at + 1));
            }
            Block::Loop {
                body,
                branch_after,
                count,
                mastery,
            } => {
                let first = steps.len();
                let mut pending_branch = None;
                for (i, kinds) in body.into_iter().enumerate() {
                    for k in kinds {
                        push(&mut steps, k);
                    }
                    if branch_after == Some(i) {
                        let at = push(
                            &mut steps,
                            StepKind::Branch {
                                contains_token: "yes".into(),
                                goto: String::new(),
                            },
                        );
                        pending_branch = Some(at);
                    }
                }
                let last = steps.len() - 1;
                let range = (steps[first].id.clone(), steps[last].id.clone());
                let rep = push(
                    &mut steps,
                    StepKind::Repetition {
                        range,
                        count: Count::Fixed(count),
                        exit: mastery.map(|consecutive_correct| MasteryRule { consecutive_correct }),
                    },
                );
                loop_spans.push((first, rep));
                if let Some(at) = pending_branch {
                    branches.push((at, rep + 1));
                }
            }
        }
    }

    for (at, earliest) in branches {
        let candidates: Vec<usize> = (earliest..steps.len())
            .filter(|&t| !loop_spans.iter().any(|&(first, rep)| t > first && t <= rep))
            .collect();
        let target = candidates
            .choose(rng)
            .copied()
            .unwrap_or(steps.len() - 1);
        let id = steps[target].id.clone();
        if let StepKind::Branch { goto, .. } = &mut steps[at].kind {
            *goto = id;
        }
    }
    steps
}

/// Random toggles for the flow's alternative slots.
pub fn random_overrides(rng: &mut impl Rng, flow: &FlowDefinition) -> BTreeMap<String, Source> {
    let mut overrides = BTreeMap::new();
    for slot in flow.toggle_slots() {
        if rng.random_bool(0.7) {
            let source = if rng.random_bool(0.5) { Source::Ai } else { Source::Human };
            overrides.insert(slot.to_string(), source);
        }
    }
    overrides
}

/// `n` flows that pass validation, generated from `seed`.
pub fn valid_corpus(seed: u64, n: usize) -> Vec<FuzzCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        attempt += 1;
        let case_seed = rng.random();
        let mut case_rng = ChaCha8Rng::seed_from_u64(case_seed);
        let flow = random_flow(&mut case_rng, &format!("fuzz-{attempt}"));
        if !validate_flow(&flow).ok {
            continue;
        }
        let overrides = random_overrides(&mut case_rng, &flow);
        out.push(FuzzCase {
            seed: case_seed,
            flow,
            overrides,
        });
    }
    out
}

const RESPONSES: [&str; 8] = [
    "yes",
    "No, not yet.",
    "CORRECT, well reasoned",
    "INCORRECT. Review the notes",
    "Yes, the goal was achieved.",
    "Here is a longer answer with several words in it",
    "A response with {{braces}} inside",
    "",
];

/// Provider returning seeded random responses; never runs out.
pub struct RandomProvider {
    rng: Mutex<ChaCha8Rng>,
}

impl RandomProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Provider for RandomProvider {
    fn generate(&self, _invocation_id: &str, _bundle: &PromptBundle) -> Result<String, ProviderError> {
        let mut rng = self.rng.lock().expect("rng lock");
        Ok(RESPONSES.choose(&mut *rng).unwrap().to_string())
    }
}

/// Inputs of random length within the step's word limit.
pub struct RandomInputs {
    rng: ChaCha8Rng,
}

impl RandomInputs {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl InputSource for RandomInputs {
    fn next_input(&mut self, slot_id: &str, _step_id: &str, max_words: Option<u32>) -> Option<(String, String)> {
        let limit = max_words.unwrap_or(25) as usize;
        let n = self.rng.random_range(0..=limit);
        let mut words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        if n > 0 && self.rng.random_bool(0.1) {
            words[0] = "{{x}}".into();
        }
        Some((slot_id.to_string(), words.join(" ")))
    }
}

/// Runs a session like [`crate::driver::drive`], occasionally substituting
/// instructor control actions for the awaited stimulus. Returns every event
/// and a checkpoint state after each batch of events.
pub fn drive_with_controls(
    engine: &Engine,
    state: &mut SessionState,
    provider: &dyn Provider,
    inputs: &mut dyn InputSource,
    seed: u64,
) -> Result<(Vec<Event>, Vec<SessionState>), EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut checkpoints = Vec::new();
    loop {
        if state.status.is_terminal() {
            return Ok((events, checkpoints));
        }
        let before = state.clone();
        let action = engine.next_action(state)?;
        let batch = match action {
            EngineAction::Complete => return Ok((events, checkpoints)),
            EngineAction::Deliver { event } => {
                checkpoints.push(before);
                vec![event]
            }
            EngineAction::AwaitInput {
                slot_id,
                step_id,
                max_words,
            } => {
                checkpoints.push(state.clone());
                if rng.random_bool(0.02) {
                    engine.control(state, &ControlAction::End)?
                } else if rng.random_bool(0.08) {
                    let text = rng.random_bool(0.5).then(|| "moving on".to_string());
                    engine.control(state, &ControlAction::Advance { text })?
                } else {
                    let (slot, content) = inputs.next_input(&slot_id, &step_id, max_words).expect("random inputs");
                    engine.submit_input(state, &slot, &content)?
                }
            }
            EngineAction::InvokeAgent {
                agent_id,
                invocation_id,
                prompt_bundle,
                ..
            } => {
                checkpoints.push(state.clone());
                if rng.random_bool(0.08) {
                    engine.control(
                        state,
                        &ControlAction::OverrideResponse {
                            text: "Instructor override.".into(),
                        },
                    )?
                } else {
                    let text = provider.generate(&invocation_id, &prompt_bundle).expect("random provider");
                    engine.apply_agent_response(state, &agent_id, &text)?
                }
            }
        };
        events.extend(batch);
    }
}
