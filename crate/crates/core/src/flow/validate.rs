//! Static checks run before a flow may start a session.
//!
//! Besides reference and structure checks, a must-analysis over the flow's
//! control graph (both variants of every alternative, every branch outcome,
//! loop back edges) proves that each `ai_response` has a pending response from
//! its agent, that each branch has a response to inspect, and that every
//! runtime placeholder is bound before the step that uses it.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::Serialize;

use super::{Count, FlowDefinition, Role, Source, Step, StepKind, Visibility};
use crate::text::{scan_placeholders, PlaceholderKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_id: Option<String>,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{}", if self.ok { "ok" } else { "invalid" })?;
        for d in &self.diagnostics {
            let severity = match d.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            match &d.step_id {
                Some(step) => writeln!(f, "  {severity} [{}] step {step}: {}", d.code, d.message)?,
                None => writeln!(f, "  {severity} [{}] {}", d.code, d.message)?,
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Collector {
    diagnostics: Vec<Diagnostic>,
}

impl Collector {
    fn error(&mut self, step: Option<&str>, code: &str, message: impl Into<String>) {
        self.push(Severity::Error, step, code, message.into());
    }

    fn warn(&mut self, step: Option<&str>, code: &str, message: impl Into<String>) {
        self.push(Severity::Warning, step, code, message.into());
    }

    fn push(&mut self, severity: Severity, step: Option<&str>, code: &str, message: String) {
        let d = Diagnostic {
            severity,
            step_id: step.map(str::to_string),
            code: code.to_string(),
            message,
        };
        if !self.diagnostics.contains(&d) {
            self.diagnostics.push(d);
        }
    }

    fn finish(self) -> ValidationReport {
        ValidationReport {
            ok: !self.diagnostics.iter().any(|d| d.severity == Severity::Error),
            diagnostics: self.diagnostics,
        }
    }
}

/// Lists every violation; `ok` is true iff none is an error.
pub fn validate_flow(flow: &FlowDefinition) -> ValidationReport {
    let mut out = Collector::default();
    check_roster(flow, &mut out);
    check_references(flow, &mut out);
    check_placeholder_syntax(flow, &mut out);
    let structure_ok = check_loops(flow, &mut out) & check_branches(flow, &mut out);
    check_alternatives(flow, &mut out);
    if structure_ok {
        FlowGraph::build(flow).analyze(flow, &mut out);
    }
    out.finish()
}

fn check_roster(flow: &FlowDefinition, out: &mut Collector) {
    let mut seen = HashSet::new();
    for slot in &flow.roster {
        if slot.slot_id.trim().is_empty() {
            out.error(None, "EmptySlotId", "roster slot ids must be non-empty");
        }
        if !seen.insert(slot.slot_id.as_str()) {
            out.error(None, "DuplicateSlot", format!("slot `{}` is declared twice", slot.slot_id));
        }
        match (slot.role, slot.source) {
            (Role::AiAgent, Some(Source::Human)) | (Role::Instructor, Some(Source::Ai)) => out.error(
                None,
                "RoleSourceConflict",
                format!("slot `{}` has role {} but source {}", slot.slot_id, slot.role.as_str(), slot.source.unwrap().as_str()),
            ),
            _ => {}
        }
        if slot.role == Role::AiAgent && flow.agent(&slot.slot_id).is_none() {
            out.warn(
                None,
                "AgentSlotWithoutConfig",
                format!("ai-agent slot `{}` has no matching agent configuration", slot.slot_id),
            );
        }
    }
    let instructors = flow.roster.iter().filter(|s| s.role == Role::Instructor).count();
    if instructors != 1 {
        out.error(
            None,
            "InstructorCount",
            format!("roster must hold exactly one instructor slot, found {instructors}"),
        );
    }

    let mut agents = HashSet::new();
    for agent in &flow.agents {
        if !agents.insert(agent.agent_id.as_str()) {
            out.error(None, "DuplicateAgent", format!("agent `{}` is declared twice", agent.agent_id));
        }
        if agent.context_budget_words == 0 {
            out.error(None, "InvalidBudget", format!("agent `{}` has a zero word budget", agent.agent_id));
        }
    }
}

/// Agent id addressed by a `to` entry, when the entry is an ai-agent slot with a configuration.
pub(crate) fn agent_target<'a>(flow: &'a FlowDefinition, slot_id: &str) -> Option<&'a str> {
    let slot = flow.slot(slot_id)?;
    if slot.role != Role::AiAgent {
        return None;
    }
    flow.agent(slot_id).map(|a| a.agent_id.as_str())
}

fn check_references(flow: &FlowDefinition, out: &mut Collector) {
    for step in flow.steps.iter().flat_map(Step::leaves) {
        let id = Some(step.id.as_str());
        let slots = |list: &[String], what: &str, out: &mut Collector| {
            for slot in list {
                if flow.slot(slot).is_none() {
                    out.error(id, "UnknownParticipant", format!("{what} names unknown slot `{slot}`"));
                }
            }
        };
        let agent_ref = |agent: &str, out: &mut Collector| {
            if flow.agent(agent).is_none() {
                out.error(id, "UnknownAgent", format!("agent `{agent}` is not configured"));
            }
        };
        match &step.kind {
            StepKind::AgentPrompt { agent, text } => {
                agent_ref(agent, out);
                if text.trim().is_empty() {
                    out.error(id, "EmptyPersona", "agent_prompt text must be non-empty");
                }
            }
            StepKind::ReferenceMaterials {
                agent, audience, ..
            } => {
                agent_ref(agent, out);
                slots(audience, "audience", out);
            }
            StepKind::InstructionLearner { to, .. } => slots(to, "to", out),
            StepKind::InstructionAi { agent, .. } => agent_ref(agent, out),
            StepKind::UserInput { from, to, .. } => {
                slots(std::slice::from_ref(from), "from", out);
                slots(to, "to", out);
                if let Some(slot) = flow.slot(from) {
                    if slot.role == Role::AiAgent {
                        out.error(id, "InvalidSender", format!("ai-agent slot `{from}` cannot supply user input"));
                    }
                }
                let targets = to.iter().filter(|t| agent_target(flow, t).is_some()).count();
                if targets > 1 {
                    out.error(id, "MultipleAgentRecipients", "user input may address at most one agent");
                }
            }
            StepKind::AiResponse { agent, visibility } => {
                agent_ref(agent, out);
                if let Visibility::Slots(list) = visibility {
                    slots(list, "visibility", out);
                }
            }
            StepKind::Repetition { .. } | StepKind::Branch { .. } | StepKind::Alternative { .. } => {}
        }
    }

    for step in &flow.steps {
        if let StepKind::UserInput { from, .. } = &step.kind {
            if flow.slot(from).and_then(|s| s.source) == Some(Source::Ai) {
                out.error(
                    Some(&step.id),
                    "AiSenderInput",
                    format!("slot `{from}` is sourced by ai but must type this input"),
                );
            }
        }
    }
}

fn texts(flow: &FlowDefinition) -> Vec<(Option<&str>, &str)> {
    let mut texts: Vec<(Option<&str>, &str)> = vec![(None, flow.title.as_str())];
    texts.extend(flow.objectives.iter().map(|o| (None, o.as_str())));
    texts.extend(flow.agents.iter().map(|a| (None, a.persona_prompt.as_str())));
    for step in flow.steps.iter().flat_map(Step::leaves) {
        if let Some(text) = step.kind.text() {
            texts.push((Some(step.id.as_str()), text));
        }
    }
    texts
}

fn check_placeholder_syntax(flow: &FlowDefinition, out: &mut Collector) {
    for (step, text) in texts(flow) {
        match scan_placeholders(text) {
            Err(e) => out.error(step, "MalformedPlaceholder", e.to_string()),
            Ok(refs) => {
                for r in refs {
                    let kind = PlaceholderKind::classify(&r.name);
                    if let PlaceholderKind::Template(name) = kind {
                        out.error(
                            step,
                            "UnresolvedTemplatePlaceholder",
                            format!("template placeholder `{name}` must be bound by instantiation"),
                        );
                    } else if step.is_none() {
                        out.error(
                            None,
                            "UnboundRuntimePlaceholder",
                            format!("runtime placeholder `{}` cannot appear outside step text", r.name),
                        );
                    }
                }
            }
        }
    }
    for step in &flow.steps {
        if let StepKind::Repetition {
            count: Count::Placeholder(name),
            ..
        } = &step.kind
        {
            out.error(
                Some(&step.id),
                "UnresolvedTemplatePlaceholder",
                format!("repetition count `{name}` must be bound by instantiation"),
            );
        }
    }
}

/// Returns false when loop structure is too broken for flow analysis.
fn check_loops(flow: &FlowDefinition, out: &mut Collector) -> bool {
    let mut ok = true;
    let mut extents: Vec<(usize, usize, &str)> = Vec::new();
    for (rep, step) in flow.steps.iter().enumerate() {
        let StepKind::Repetition { range, count, exit } = &step.kind else {
            continue;
        };
        let id = Some(step.id.as_str());
        if count.fixed() == Some(0) {
            out.error(id, "ZeroCount", "repetition count must be positive");
        }
        let (Some(first), Some(last)) = (flow.step_index(&range.0), flow.step_index(&range.1)) else {
            for bound in [&range.0, &range.1] {
                if flow.step_index(bound).is_none() {
                    out.error(id, "UnknownTarget", format!("range bound `{bound}` is not a top-level step"));
                }
            }
            ok = false;
            continue;
        };
        if first > last {
            out.error(id, "ReversedRange", format!("range [{}, {}] runs backwards", range.0, range.1));
            ok = false;
            continue;
        }
        if (first..=last).contains(&rep) {
            out.error(id, "RangeContainsRepetition", "a repetition range may not contain its own step");
            ok = false;
            continue;
        }
        if rep != last + 1 {
            out.error(
                id,
                "DetachedRepetition",
                format!("repetition must directly follow its range end `{}`", range.1),
            );
            ok = false;
            continue;
        }
        if let Some(rule) = exit {
            let graded = flow.steps[first..=last]
                .iter()
                .flat_map(Step::leaves)
                .any(|s| matches!(s.kind, StepKind::InstructionAi { grade: true, .. }));
            if !graded {
                out.error(
                    id,
                    "MasteryWithoutGrading",
                    format!(
                        "mastery rule ({} consecutive correct) needs a graded instruction_ai in range",
                        rule.consecutive_correct
                    ),
                );
            }
        }
        for step in &flow.steps[first..=last] {
            if matches!(step.kind, StepKind::Repetition { .. }) {
                out.error(Some(&step.id), "OverlappingRanges", "repetition steps cannot sit inside another range");
                ok = false;
            }
        }
        for &(other_first, other_rep, other_id) in &extents {
            if first <= other_rep && other_first <= rep {
                out.error(id, "OverlappingRanges", format!("range overlaps the range of step `{other_id}`"));
                ok = false;
            }
        }
        extents.push((first, rep, step.id.as_str()));
    }
    ok
}

fn check_branches(flow: &FlowDefinition, out: &mut Collector) -> bool {
    let mut ok = true;
    let ranges = flow.loop_ranges();
    for (index, step) in flow.steps.iter().enumerate() {
        let StepKind::Branch {
            contains_token,
            goto,
        } = &step.kind
        else {
            continue;
        };
        let id = Some(step.id.as_str());
        if crate::text::normalize_tokens(contains_token).len() != 1 {
            out.error(id, "InvalidToken", format!("`{contains_token}` does not normalize to a single token"));
        }
        let Some(target) = flow.step_index(goto) else {
            out.error(id, "UnknownTarget", format!("goto target `{goto}` is not a top-level step"));
            ok = false;
            continue;
        };
        if target <= index {
            out.error(id, "BackwardBranch", format!("goto `{goto}` does not lie after the branch"));
            ok = false;
            continue;
        }
        if matches!(flow.steps[target].kind, StepKind::Repetition { .. }) {
            out.error(id, "BranchIntoLoopHeader", format!("goto `{goto}` targets a repetition step"));
            ok = false;
            continue;
        }
        for &(first, last, _) in &ranges {
            let encloses = (first..=last).contains(&index);
            let bad = if encloses {
                target < last
            } else {
                first < target && target <= last
            };
            if bad {
                out.error(id, "BranchIntoRange", format!("goto `{goto}` lands inside a repetition body"));
                ok = false;
            }
        }
    }
    ok
}

fn check_alternatives(flow: &FlowDefinition, out: &mut Collector) {
    for step in &flow.steps {
        let StepKind::Alternative {
            slot,
            human_variant,
            ai_variant,
        } = &step.kind
        else {
            continue;
        };
        let id = Some(step.id.as_str());
        match flow.slot(slot) {
            None => out.error(id, "UnknownParticipant", format!("alternative slot `{slot}` is not in the roster")),
            Some(s) => {
                if s.role != Role::Learner {
                    out.error(id, "AlternativeSlotRole", format!("alternative slot `{slot}` must be a learner"));
                }
                if s.source.is_none() {
                    out.error(id, "MissingToggle", format!("slot `{slot}` declares no source toggle"));
                }
            }
        }
        if let StepKind::UserInput { from, .. } = &human_variant.kind {
            if from != slot {
                out.error(
                    Some(&human_variant.id),
                    "AlternativeSlotMismatch",
                    format!("human variant is sent by `{from}`, not the alternative slot `{slot}`"),
                );
            }
        }
        if let (StepKind::InstructionAi { agent: a, .. }, StepKind::AiResponse { agent: b, .. }) =
            (&ai_variant.0.kind, &ai_variant.1.kind)
        {
            if a != b {
                out.error(
                    Some(&ai_variant.1.id),
                    "UnpairedResponse",
                    format!("ai variant instructs `{a}` but delivers a response from `{b}`"),
                );
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ready {
    Nothing,
    Agent(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Facts {
    bound: BTreeSet<String>,
    ready: Ready,
    has_response: bool,
}

impl Facts {
    fn initial() -> Self {
        Self {
            bound: BTreeSet::new(),
            ready: Ready::Nothing,
            has_response: false,
        }
    }

    fn meet(&self, other: &Facts) -> Facts {
        Facts {
            bound: self.bound.intersection(&other.bound).cloned().collect(),
            ready: if self.ready == other.ready {
                self.ready.clone()
            } else {
                Ready::Unknown
            },
            has_response: self.has_response && other.has_response,
        }
    }
}

struct Node<'a> {
    top: usize,
    step: &'a Step,
    in_alternative: bool,
    succ: Vec<usize>,
}

struct FlowGraph<'a> {
    nodes: Vec<Node<'a>>,
    entries: Vec<Vec<usize>>,
}

impl<'a> FlowGraph<'a> {
    fn build(flow: &'a FlowDefinition) -> Self {
        let mut nodes = Vec::new();
        let mut entries = Vec::new();
        let push = |nodes: &mut Vec<Node<'a>>, top, step, in_alternative| {
            nodes.push(Node {
                top,
                step,
                in_alternative,
                succ: Vec::new(),
            });
            nodes.len() - 1
        };
        for (top, step) in flow.steps.iter().enumerate() {
            match &step.kind {
                StepKind::Alternative {
                    human_variant,
                    ai_variant,
                    ..
                } => {
                    let human = push(&mut nodes, top, human_variant.as_ref(), true);
                    let instruct = push(&mut nodes, top, &ai_variant.0, true);
                    let respond = push(&mut nodes, top, &ai_variant.1, true);
                    nodes[instruct].succ.push(respond);
                    entries.push(vec![human, instruct]);
                }
                _ => {
                    let n = push(&mut nodes, top, step, false);
                    entries.push(vec![n]);
                }
            }
        }
        entries.push(Vec::new());

        for node in &mut nodes {
            let top = node.top;
            let is_ai_instruction = matches!(
                &flow.steps[top].kind,
                StepKind::Alternative { ai_variant, .. } if std::ptr::eq(&ai_variant.0, node.step)
            );
            if is_ai_instruction {
                continue;
            }
            let mut succ = entries[top + 1].clone();
            match &node.step.kind {
                StepKind::Branch { goto, .. } => {
                    if let Some(target) = flow.step_index(goto) {
                        succ.extend(entries[target].iter().copied());
                    }
                }
                StepKind::Repetition { range, count, .. } if count.fixed().unwrap_or(0) > 1 => {
                    if let Some(first) = flow.step_index(&range.0) {
                        succ.extend(entries[first].iter().copied());
                    }
                }
                _ => {}
            }
            node.succ.extend(succ);
        }
        Self { nodes, entries }
    }

    fn transfer(&self, flow: &FlowDefinition, node: &Node, mut facts: Facts) -> Facts {
        if node.in_alternative {
            facts.bound.insert("role".into());
        }
        match &node.step.kind {
            StepKind::InstructionAi { agent, grade, .. } => {
                facts.ready = Ready::Agent(agent.clone());
                facts.has_response = true;
                if *grade {
                    facts.bound.insert("score".into());
                }
            }
            StepKind::UserInput { to, .. } => {
                facts.bound.insert(format!("input:{}", node.step.id));
                if let Some(agent) = to.iter().find_map(|t| agent_target(flow, t)) {
                    facts.ready = Ready::Agent(agent.to_string());
                    facts.has_response = true;
                }
            }
            StepKind::AiResponse { .. } => facts.ready = Ready::Nothing,
            _ => {}
        }
        facts
    }

    fn analyze(&self, flow: &FlowDefinition, out: &mut Collector) {
        let mut states: Vec<Option<Facts>> = vec![None; self.nodes.len()];
        let mut work: Vec<usize> = Vec::new();
        for &n in &self.entries[0] {
            states[n] = Some(Facts::initial());
            work.push(n);
        }
        while let Some(n) = work.pop() {
            let facts = states[n].clone().expect("queued nodes have a state");
            let out_facts = self.transfer(flow, &self.nodes[n], facts);
            for &s in &self.nodes[n].succ {
                let merged = match &states[s] {
                    None => out_facts.clone(),
                    Some(old) => old.meet(&out_facts),
                };
                if states[s].as_ref() != Some(&merged) {
                    states[s] = Some(merged);
                    work.push(s);
                }
            }
        }

        let input_steps: HashMap<&str, ()> = flow
            .steps
            .iter()
            .flat_map(Step::leaves)
            .filter(|s| matches!(s.kind, StepKind::UserInput { .. }))
            .map(|s| (s.id.as_str(), ()))
            .collect();
        let ranges = flow.loop_ranges();

        for (n, node) in self.nodes.iter().enumerate() {
            let Some(mut facts) = states[n].clone() else {
                continue;
            };
            if node.in_alternative {
                facts.bound.insert("role".into());
            }
            let id = Some(node.step.id.as_str());
            match &node.step.kind {
                StepKind::AiResponse { agent, .. } => {
                    if facts.ready != Ready::Agent(agent.clone()) {
                        out.error(
                            id,
                            "UnpairedResponse",
                            format!("no pending invocation of `{agent}` reaches this step on every path"),
                        );
                    }
                }
                StepKind::Branch { .. } if !facts.has_response => {
                    out.error(id, "NoResponseInScope", "branch can run before any agent has responded");
                }
                _ => {}
            }
            let Some(text) = node.step.kind.text() else {
                continue;
            };
            let Ok(refs) = scan_placeholders(text) else {
                continue;
            };
            for r in refs {
                match PlaceholderKind::classify(&r.name) {
                    PlaceholderKind::Template(_) => {}
                    PlaceholderKind::LoopIndex => {
                        if !ranges.iter().any(|&(f, l, _)| (f..=l).contains(&node.top)) {
                            out.error(id, "LoopIndexOutsideLoop", "`{{loop_index}}` is only bound inside a repetition body");
                        }
                    }
                    PlaceholderKind::Input(step) if !input_steps.contains_key(step.as_str()) => {
                        out.error(id, "UnknownInputRef", format!("`{}` does not name a user_input step", r.name));
                    }
                    _ => {
                        if !facts.bound.contains(&r.name) {
                            out.error(
                                id,
                                "UnboundRuntimePlaceholder",
                                format!("`{}` is not bound on every path reaching this step", r.name),
                            );
                        }
                    }
                }
            }
        }
    }
}
