//! Text helpers shared by the engine, the gateway and the content store:
//! word counting, token normalization and `{{...}}` placeholder handling.

use std::collections::BTreeMap;

use thiserror::Error;

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|word| {
            word.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|token| !token.is_empty())
        .collect()
}

/// Rewrites every `{{` as `{\{` so user-supplied text can never be mistaken
/// for a placeholder. Word counts are preserved.
pub fn neutralize_braces(text: &str) -> String {
    let mut out = text.to_string();
    while out.contains("{{") {
        out = out.replace("{{", "{\\{");
    }
    out
}

/// One `{{name}}` occurrence in a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceholderRef {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// How a placeholder is resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlaceholderKind {
    /// `{{input:STEP_ID}}`
    Input(String),
    Role,
    LoopIndex,
    Score,
    /// Anything else; bound when a template is instantiated.
    Template(String),
}

impl PlaceholderKind {
    pub fn classify(name: &str) -> Self {
        match name {
            "role" => Self::Role,
            "loop_index" => Self::LoopIndex,
            "score" => Self::Score,
            _ => match name.strip_prefix("input:") {
                Some(step) => Self::Input(step.to_string()),
                None => Self::Template(name.to_string()),
            },
        }
    }

    pub fn is_runtime(&self) -> bool {
        !matches!(self, Self::Template(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlaceholderError {
    #[error("malformed placeholder at byte {0}")]
    Malformed(usize),
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | ':' | '.'))
}

/// Finds every placeholder in `text`. A `{{` that does not open a well-formed
/// placeholder is an error.
pub fn scan_placeholders(text: &str) -> Result<Vec<PlaceholderRef>, PlaceholderError> {
    let mut refs = Vec::new();
    let mut pos = 0;
    while let Some(offset) = text[pos..].find("{{") {
        let start = pos + offset;
        let body_start = start + 2;
        let close = text[body_start..]
            .find("}}")
            .ok_or(PlaceholderError::Malformed(start))?;
        let raw = &text[body_start..body_start + close];
        let name = raw.trim();
        if raw.contains('{') || !valid_name(name) {
            return Err(PlaceholderError::Malformed(start));
        }
        let end = body_start + close + 2;
        refs.push(PlaceholderRef {
            name: name.to_string(),
            start,
            end,
        });
        pos = end;
    }
    Ok(refs)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpolateError {
    #[error("unbound runtime placeholder `{0}`")]
    UnboundRuntimePlaceholder(String),
    #[error(transparent)]
    Placeholder(#[from] PlaceholderError),
}

/// Replaces every `{{...}}` occurrence from `bindings`. Binding values are
/// neutralized so the output never contains `{{`.
pub fn interpolate(text: &str, bindings: &BTreeMap<String, String>) -> Result<String, InterpolateError> {
    substitute(text, |name| bindings.get(name).map(|v| neutralize_braces(v)))
        .map_err(|e| match e {
            SubstituteError::Unbound(name) => InterpolateError::UnboundRuntimePlaceholder(name),
            SubstituteError::Placeholder(p) => p.into(),
        })
}

pub(crate) enum SubstituteError {
    Unbound(String),
    Placeholder(PlaceholderError),
}

/// Rewrites placeholders with `resolve`; `None` aborts with `Unbound`.
pub(crate) fn substitute(
    text: &str,
    mut resolve: impl FnMut(&str) -> Option<String>,
) -> Result<String, SubstituteError> {
    let refs = scan_placeholders(text).map_err(SubstituteError::Placeholder)?;
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for r in refs {
        out.push_str(&text[last..r.start]);
        let value = resolve(&r.name).ok_or_else(|| SubstituteError::Unbound(r.name.clone()))?;
        out.push_str(&value);
        last = r.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// Replaces only the placeholders `resolve` knows about, leaving the rest verbatim.
pub(crate) fn substitute_partial(
    text: &str,
    mut resolve: impl FnMut(&str) -> Option<String>,
) -> Result<String, PlaceholderError> {
    let refs = scan_placeholders(text)?;
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for r in refs {
        out.push_str(&text[last..r.start]);
        match resolve(&r.name) {
            Some(value) => out.push_str(&value),
            None => out.push_str(&text[r.start..r.end]),
        }
        last = r.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}
