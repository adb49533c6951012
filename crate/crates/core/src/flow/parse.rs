use std::collections::{BTreeMap, HashSet};

use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{
    AgentConfig, Count, FlowDefinition, MasteryRule, ParticipantSlot, Role, Source, Step, StepKind,
    Visibility, DEFAULT_CONTEXT_BUDGET_WORDS,
};
use crate::text::{scan_placeholders, PlaceholderKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unknown step kind `{kind}` at step `{step}`")]
    UnknownStepKind { step: String, kind: String },
    #[error("duplicate step id `{0}`")]
    DuplicateStepId(String),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("unknown key `{key}` in {context}")]
    UnknownKey { context: String, key: String },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::MalformedDocument(_) => "MalformedDocument",
            ParseError::UnknownStepKind { .. } => "UnknownStepKind",
            ParseError::DuplicateStepId(_) => "DuplicateStepId",
            ParseError::MissingField(_) => "MissingField",
            ParseError::UnknownKey { .. } => "UnknownKey",
        }
    }
}

type Result<T> = std::result::Result<T, ParseError>;

/// Parses a JSON flow document. Placeholders are recorded verbatim.
pub fn parse_flow(document: &str) -> Result<FlowDefinition> {
    let value: Value =
        serde_json::from_str(document).map_err(|e| ParseError::MalformedDocument(e.to_string()))?;
    flow_from_value(value)
}

/// Serializes a flow back to its document form (pretty JSON, schema key order).
pub fn to_document(flow: &FlowDefinition) -> String {
    serde_json::to_string_pretty(flow).expect("flow documents always serialize")
}

/// Object reader that remembers which keys were consumed so leftovers can be
/// reported as unknown.
struct Fields {
    context: String,
    map: Map<String, Value>,
}

impl Fields {
    fn new(value: Value, context: impl Into<String>) -> Result<Self> {
        let context = context.into();
        match value {
            Value::Object(map) => Ok(Self { context, map }),
            other => Err(ParseError::MalformedDocument(format!(
                "{context} must be an object, found {}",
                type_name(&other)
            ))),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<Value> {
        self.take(key)
            .ok_or_else(|| ParseError::MissingField(format!("{}.{key}", self.context)))
    }

    fn string(&mut self, key: &str) -> Result<String> {
        let v = self.require(key)?;
        self.as_string(key, v)
    }

    fn opt_string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key).map(|v| self.as_string(key, v)).transpose()
    }

    fn as_string(&self, key: &str, v: Value) -> Result<String> {
        match v {
            Value::String(s) => Ok(s),
            other => Err(self.wrong_type(key, "a string", &other)),
        }
    }

    fn strings(&mut self, key: &str) -> Result<Vec<String>> {
        let v = self.require(key)?;
        self.as_strings(key, v)
    }

    fn opt_strings(&mut self, key: &str) -> Result<Vec<String>> {
        match self.take(key) {
            Some(v) => self.as_strings(key, v),
            None => Ok(Vec::new()),
        }
    }

    fn as_strings(&self, key: &str, v: Value) -> Result<Vec<String>> {
        match v {
            Value::Array(items) => items
                .into_iter()
                .map(|item| self.as_string(key, item))
                .collect(),
            other => Err(self.wrong_type(key, "an array of strings", &other)),
        }
    }

    fn opt_positive(&mut self, key: &str) -> Result<Option<u32>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let n = v
                    .as_u64()
                    .filter(|n| *n > 0 && *n <= u64::from(u32::MAX))
                    .ok_or_else(|| self.wrong_type(key, "a positive integer", &v))?;
                Ok(Some(n as u32))
            }
        }
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(b)),
            Some(other) => Err(self.wrong_type(key, "a boolean", &other)),
        }
    }

    fn wrong_type(&self, key: &str, expected: &str, found: &Value) -> ParseError {
        ParseError::MalformedDocument(format!(
            "{}.{key} must be {expected}, found {}",
            self.context,
            type_name(found)
        ))
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(key) => Err(ParseError::UnknownKey {
                context: self.context,
                key: key.clone(),
            }),
            None => Ok(()),
        }
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn flow_from_value(value: Value) -> Result<FlowDefinition> {
    let mut top = Fields::new(value, "flow")?;
    let id = top.string("id")?;
    let title = top.string("title")?;
    let objectives = top.strings("objectives")?;

    let roster = match top.require("roster")? {
        Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| slot_from_value(v, i))
            .collect::<Result<Vec<_>>>()?,
        other => return Err(top.wrong_type("roster", "an array", &other)),
    };
    let agents = match top.require("agents")? {
        Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| agent_from_value(v, i))
            .collect::<Result<Vec<_>>>()?,
        other => return Err(top.wrong_type("agents", "an array", &other)),
    };
    let steps = match top.require("steps")? {
        Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| step_from_value(v, &format!("steps[{i}]")))
            .collect::<Result<Vec<_>>>()?,
        other => return Err(top.wrong_type("steps", "an array", &other)),
    };
    if steps.is_empty() {
        return Err(ParseError::MissingField("steps non-empty".into()));
    }
    let templates = match top.take("templates") {
        None => None,
        Some(Value::Object(map)) => Some(
            map.into_iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k, s)),
                    other => Err(ParseError::MalformedDocument(format!(
                        "templates.{k} must be a string, found {}",
                        type_name(&other)
                    ))),
                })
                .collect::<Result<BTreeMap<_, _>>>()?,
        ),
        Some(other) => return Err(top.wrong_type("templates", "an object", &other)),
    };
    top.finish()?;

    let mut seen = HashSet::new();
    for step in steps.iter().flat_map(Step::leaves) {
        if !seen.insert(step.id.as_str()) {
            return Err(ParseError::DuplicateStepId(step.id.clone()));
        }
    }

    Ok(FlowDefinition {
        id,
        title,
        objectives,
        roster,
        agents,
        steps,
        templates,
    })
}

fn slot_from_value(value: Value, index: usize) -> Result<ParticipantSlot> {
    let mut f = Fields::new(value, format!("roster[{index}]"))?;
    let slot_id = f.string("slot_id")?;
    let role = match f.string("role")?.as_str() {
        "instructor" => Role::Instructor,
        "learner" => Role::Learner,
        "ai-agent" => Role::AiAgent,
        other => {
            return Err(ParseError::MalformedDocument(format!(
                "roster[{index}].role `{other}` is not one of instructor, learner, ai-agent"
            )))
        }
    };
    let team = f.opt_string("team")?;
    let source = match f.opt_string("source")?.as_deref() {
        None => None,
        Some("human") => Some(Source::Human),
        Some("ai") => Some(Source::Ai),
        Some(other) => {
            return Err(ParseError::MalformedDocument(format!(
                "roster[{index}].source `{other}` is not one of human, ai"
            )))
        }
    };
    f.finish()?;
    Ok(ParticipantSlot {
        slot_id,
        role,
        team,
        source,
    })
}

fn agent_from_value(value: Value, index: usize) -> Result<AgentConfig> {
    let mut f = Fields::new(value, format!("agents[{index}]"))?;
    let agent_id = f.string("agent_id")?;
    let persona_prompt = f.opt_string("persona_prompt")?.unwrap_or_default();
    let material_refs = f.opt_strings("material_refs")?;
    let params = match f.take("params") {
        None => BTreeMap::new(),
        Some(Value::Object(map)) => map.into_iter().collect(),
        Some(other) => return Err(f.wrong_type("params", "an object", &other)),
    };
    let context_budget_words = f
        .opt_positive("context_budget_words")?
        .unwrap_or(DEFAULT_CONTEXT_BUDGET_WORDS);
    f.finish()?;
    Ok(AgentConfig {
        agent_id,
        persona_prompt,
        material_refs,
        params,
        context_budget_words,
    })
}

fn step_from_value(value: Value, context: &str) -> Result<Step> {
    let mut f = Fields::new(value, context)?;
    let id = f.string("no")?;
    if id.trim().is_empty() {
        return Err(ParseError::MalformedDocument(format!("{context}.no must be non-empty")));
    }
    let context = format!("step `{id}`");
    f.context = context.clone();
    let kind_name = f.string("kind")?;
    let kind = match kind_name.as_str() {
        "agent_prompt" => StepKind::AgentPrompt {
            agent: f.string("agent")?,
            text: f.string("text")?,
        },
        "reference_materials" => StepKind::ReferenceMaterials {
            agent: f.string("agent")?,
            materials: f.strings("materials")?,
            audience: f.strings("audience")?,
        },
        "instruction_learner" => StepKind::InstructionLearner {
            to: f.strings("to")?,
            text: f.string("text")?,
        },
        "instruction_ai" => StepKind::InstructionAi {
            agent: f.string("agent")?,
            text: f.string("text")?,
            grade: f.opt_bool("grade")?.unwrap_or(false),
        },
        "user_input" => StepKind::UserInput {
            from: f.string("from")?,
            to: f.strings("to")?,
            max_words: f.opt_positive("max_words")?,
        },
        "ai_response" => {
            let agent = f.string("agent")?;
            let visibility = match f.require("visibility")? {
                Value::String(s) if s == "all" => Visibility::All,
                v @ Value::Array(_) => Visibility::Slots(f.as_strings("visibility", v)?),
                other => return Err(f.wrong_type("visibility", "\"all\" or an array of slot ids", &other)),
            };
            StepKind::AiResponse { agent, visibility }
        }
        "repetition" => {
            let range = f.strings("range")?;
            let range = match <[String; 2]>::try_from(range) {
                Ok([first, last]) => (first, last),
                Err(_) => {
                    return Err(ParseError::MalformedDocument(format!(
                        "{context}.range must hold exactly two step ids"
                    )))
                }
            };
            let count = match f.require("count")? {
                Value::Number(n) => Count::Fixed(
                    n.as_u64()
                        .filter(|n| *n <= u64::from(u32::MAX))
                        .ok_or_else(|| {
                            ParseError::MalformedDocument(format!(
                                "{context}.count must be a non-negative integer"
                            ))
                        })? as u32,
                ),
                Value::String(s) => Count::Placeholder(count_placeholder(&s, &context)?),
                other => return Err(f.wrong_type("count", "an integer", &other)),
            };
            let exit = match f.take("exit") {
                None => None,
                Some(v) => {
                    let mut rule = Fields::new(v, format!("{context}.exit"))?;
                    let consecutive_correct = rule
                        .opt_positive("consecutive_correct")?
                        .ok_or_else(|| {
                            ParseError::MissingField(format!("{context}.exit.consecutive_correct"))
                        })?;
                    rule.finish()?;
                    Some(MasteryRule { consecutive_correct })
                }
            };
            StepKind::Repetition { range, count, exit }
        }
        "branch" => {
            let on = f.string("on")?;
            if on != "last_agent_response" {
                return Err(ParseError::MalformedDocument(format!(
                    "{context}.on must be \"last_agent_response\", found `{on}`"
                )));
            }
            StepKind::Branch {
                contains_token: f.string("contains_token")?,
                goto: f.string("goto")?,
            }
        }
        "alternative" => {
            let slot = f.string("slot")?;
            let human = step_from_value(f.require("human_variant")?, &format!("{context}.human_variant"))?;
            if !matches!(human.kind, StepKind::UserInput { .. }) {
                return Err(ParseError::MalformedDocument(format!(
                    "{context}.human_variant must be a user_input step"
                )));
            }
            let ai = match f.require("ai_variant")? {
                Value::Array(items) if items.len() == 2 => {
                    let mut items = items.into_iter();
                    let first = step_from_value(items.next().unwrap(), &format!("{context}.ai_variant[0]"))?;
                    let second = step_from_value(items.next().unwrap(), &format!("{context}.ai_variant[1]"))?;
                    (first, second)
                }
                _ => {
                    return Err(ParseError::MalformedDocument(format!(
                        "{context}.ai_variant must be an [instruction_ai, ai_response] pair"
                    )))
                }
            };
            if !matches!(ai.0.kind, StepKind::InstructionAi { .. })
                || !matches!(ai.1.kind, StepKind::AiResponse { .. })
            {
                return Err(ParseError::MalformedDocument(format!(
                    "{context}.ai_variant must be an [instruction_ai, ai_response] pair"
                )));
            }
            StepKind::Alternative {
                slot,
                human_variant: Box::new(human),
                ai_variant: Box::new(ai),
            }
        }
        _ => {
            return Err(ParseError::UnknownStepKind {
                step: id,
                kind: kind_name,
            })
        }
    };
    f.finish()?;
    Ok(Step { id, kind })
}

fn count_placeholder(text: &str, context: &str) -> Result<String> {
    let malformed = || {
        ParseError::MalformedDocument(format!(
            "{context}.count must be an integer or a single template placeholder"
        ))
    };
    let refs = scan_placeholders(text).map_err(|_| malformed())?;
    match refs.as_slice() {
        [only] if only.start == 0 && only.end == text.len() => {
            match PlaceholderKind::classify(&only.name) {
                PlaceholderKind::Template(name) => Ok(name),
                _ => Err(malformed()),
            }
        }
        _ => Err(malformed()),
    }
}

impl Serialize for Visibility {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Visibility::All => serializer.serialize_str("all"),
            Visibility::Slots(slots) => {
                let mut seq = serializer.serialize_seq(Some(slots.len()))?;
                for s in slots {
                    seq.serialize_element(s)?;
                }
                seq.end()
            }
        }
    }
}

impl Serialize for Count {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Count::Fixed(n) => serializer.serialize_u32(*n),
            Count::Placeholder(name) => serializer.serialize_str(&format!("{{{{{name}}}}}")),
        }
    }
}

impl Serialize for Step {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("no", &self.id)?;
        map.serialize_entry("kind", self.kind.name())?;
        match &self.kind {
            StepKind::AgentPrompt { agent, text } => {
                map.serialize_entry("agent", agent)?;
                map.serialize_entry("text", text)?;
            }
            StepKind::ReferenceMaterials {
                agent,
                materials,
                audience,
            } => {
                map.serialize_entry("agent", agent)?;
                map.serialize_entry("materials", materials)?;
                map.serialize_entry("audience", audience)?;
            }
            StepKind::InstructionLearner { to, text } => {
                map.serialize_entry("to", to)?;
                map.serialize_entry("text", text)?;
            }
            StepKind::InstructionAi { agent, text, grade } => {
                map.serialize_entry("agent", agent)?;
                map.serialize_entry("text", text)?;
                if *grade {
                    map.serialize_entry("grade", grade)?;
                }
            }
            StepKind::UserInput {
                from,
                to,
                max_words,
            } => {
                map.serialize_entry("from", from)?;
                map.serialize_entry("to", to)?;
                if let Some(limit) = max_words {
                    map.serialize_entry("max_words", limit)?;
                }
            }
            StepKind::AiResponse { agent, visibility } => {
                map.serialize_entry("agent", agent)?;
                map.serialize_entry("visibility", visibility)?;
            }
            StepKind::Repetition { range, count, exit } => {
                map.serialize_entry("range", &[&range.0, &range.1])?;
                map.serialize_entry("count", count)?;
                if let Some(rule) = exit {
                    map.serialize_entry("exit", rule)?;
                }
            }
            StepKind::Branch {
                contains_token,
                goto,
            } => {
                map.serialize_entry("on", "last_agent_response")?;
                map.serialize_entry("contains_token", contains_token)?;
                map.serialize_entry("goto", goto)?;
            }
            StepKind::Alternative {
                slot,
                human_variant,
                ai_variant,
            } => {
                map.serialize_entry("human_variant", human_variant)?;
                map.serialize_entry("ai_variant", &[&ai_variant.0, &ai_variant.1])?;
                map.serialize_entry("slot", slot)?;
            }
        }
        map.end()
    }
}
