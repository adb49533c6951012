use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{Count, FlowDefinition, Step, StepKind};
use crate::text::{substitute_partial, PlaceholderError, PlaceholderKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template placeholder `{0}` has no binding")]
    UnboundPlaceholder(String),
    #[error("binding for `{name}` is not a positive integer: `{value}`")]
    InvalidCount { name: String, value: String },
    #[error(transparent)]
    Placeholder(#[from] PlaceholderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateOutcome {
    pub flow: FlowDefinition,
    /// Bindings no placeholder asked for (reported as warnings).
    pub unused_bindings: Vec<String>,
}

/// Substitutes every template placeholder. Runtime placeholders
/// (`input:*`, `role`, `loop_index`, `score`) are left untouched.
pub fn instantiate_template(
    template: &FlowDefinition,
    bindings: &BTreeMap<String, String>,
) -> Result<TemplateOutcome, TemplateError> {
    let mut used = BTreeSet::new();
    let mut missing: Option<String> = None;
    let mut fill = |text: &str| -> Result<String, TemplateError> {
        substitute_partial(text, |name| match PlaceholderKind::classify(name) {
            PlaceholderKind::Template(name) => match bindings.get(&name) {
                Some(value) => {
                    used.insert(name);
                    Some(value.clone())
                }
                None => {
                    missing.get_or_insert(name);
                    None
                }
            },
            _ => None,
        })
        .map_err(TemplateError::from)
    };

    let mut flow = template.clone();
    flow.title = fill(&flow.title)?;
    for objective in &mut flow.objectives {
        *objective = fill(objective)?;
    }
    for agent in &mut flow.agents {
        agent.persona_prompt = fill(&agent.persona_prompt)?;
    }
    let mut counts = Vec::new();
    for step in &mut flow.steps {
        fill_step(step, &mut fill, &mut counts)?;
    }
    if let Some(name) = missing {
        return Err(TemplateError::UnboundPlaceholder(name));
    }
    for (name, count) in counts {
        let value = bindings
            .get(&name)
            .ok_or_else(|| TemplateError::UnboundPlaceholder(name.clone()))?;
        let n: u32 = value
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| TemplateError::InvalidCount {
                name: name.clone(),
                value: value.clone(),
            })?;
        *count = Count::Fixed(n);
        used.insert(name);
    }
    flow.templates = None;

    let unused_bindings = bindings
        .keys()
        .filter(|k| !used.contains(*k))
        .cloned()
        .collect();
    Ok(TemplateOutcome {
        flow,
        unused_bindings,
    })
}

fn fill_step<'s>(
    step: &'s mut Step,
    fill: &mut impl FnMut(&str) -> Result<String, TemplateError>,
    counts: &mut Vec<(String, &'s mut Count)>,
) -> Result<(), TemplateError> {
    match &mut step.kind {
        StepKind::AgentPrompt { text, .. }
        | StepKind::InstructionLearner { text, .. }
        | StepKind::InstructionAi { text, .. } => *text = fill(text)?,
        StepKind::Repetition { count, .. } => {
            if let Count::Placeholder(name) = count {
                counts.push((name.clone(), count));
            }
        }
        StepKind::Alternative {
            human_variant,
            ai_variant,
            ..
        } => {
            fill_step(human_variant, fill, counts)?;
            fill_step(&mut ai_variant.0, fill, counts)?;
            fill_step(&mut ai_variant.1, fill, counts)?;
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::parse_flow;

    fn template(text: &str) -> FlowDefinition {
        parse_flow(&format!(
            r#"{{"id": "t", "title": "t", "objectives": [],
            "roster": [{{"slot_id": "instructor", "role": "instructor"}}],
            "agents": [],
            "steps": [{{"no": "1", "kind": "instruction_learner", "to": [], "text": "{text}"}}],
            "templates": {{"topic": "what to study"}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn zero_placeholders_is_identity() {
        let t = template("plain");
        let out = instantiate_template(&t, &BTreeMap::new()).unwrap();
        let mut expected = t.clone();
        expected.templates = None;
        assert_eq!(out.flow, expected);
        assert!(out.unused_bindings.is_empty());
    }

    #[test]
    fn unbound_placeholder() {
        let t = template("study {{topic}}");
        assert_eq!(
            instantiate_template(&t, &BTreeMap::new()),
            Err(TemplateError::UnboundPlaceholder("topic".into()))
        );
    }

    #[test]
    fn runtime_placeholders_survive_and_unused_bindings_are_reported() {
        let t = template("study {{topic}} after {{input:1}}");
        let bindings = BTreeMap::from([
            ("topic".to_string(), "ecology".to_string()),
            ("extra".to_string(), "x".to_string()),
        ]);
        let out = instantiate_template(&t, &bindings).unwrap();
        assert_eq!(out.flow.steps[0].kind.text(), Some("study ecology after {{input:1}}"));
        assert_eq!(out.unused_bindings, vec!["extra".to_string()]);
    }
}
