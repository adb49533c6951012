use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{PromptBundle, Provider, ProviderError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub response: String,
}

impl ScriptEntry {
    pub fn reply(response: impl Into<String>) -> Self {
        Self {
            pattern: None,
            response: response.into(),
        }
    }

    pub fn when(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: Some(pattern.into()),
            response: response.into(),
        }
    }
}

/// Scripted responses. `cursor` counts the leading entries already consumed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProviderScript {
    pub entries: Vec<ScriptEntry>,
    pub cursor: usize,
    used: Vec<bool>,
}

impl ProviderScript {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let used = vec![false; entries.len()];
        Self {
            entries,
            cursor: 0,
            used,
        }
    }

    /// Parses the JSON array `[{match?, response}]`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    /// Picks the first unused entry whose `match` occurs in `final_message`,
    /// else the first unused entry without a `match`.
    pub fn next_response(&mut self, final_message: &str) -> Result<String, ProviderError> {
        let open = |i: &usize| !self.used[*i];
        let matched = (self.cursor..self.entries.len())
            .filter(open)
            .find(|&i| matches!(&self.entries[i].pattern, Some(p) if final_message.contains(p.as_str())));
        let chosen = matched.or_else(|| {
            (self.cursor..self.entries.len())
                .filter(open)
                .find(|&i| self.entries[i].pattern.is_none())
        });
        let i = chosen.ok_or(ProviderError::ScriptExhausted)?;
        self.used[i] = true;
        while self.cursor < self.entries.len() && self.used[self.cursor] {
            self.cursor += 1;
        }
        Ok(self.entries[i].response.clone())
    }

    pub fn remaining(&self) -> usize {
        self.used.iter().filter(|u| !**u).count()
    }
}

/// Deterministic provider backed by a [`ProviderScript`].
#[derive(Debug, Default)]
pub struct StubProvider {
    script: Mutex<ProviderScript>,
}

impl StubProvider {
    pub fn new(script: ProviderScript) -> Self {
        Self {
            script: Mutex::new(script),
        }
    }

    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(ProviderScript::new(
            responses.into_iter().map(ScriptEntry::reply).collect(),
        ))
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().expect("script lock").remaining()
    }
}

impl Provider for StubProvider {
    fn generate(&self, _invocation_id: &str, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let last = bundle.final_message().map(|m| m.text.as_str()).unwrap_or("");
        self.script.lock().expect("script lock").next_response(last)
    }
}
