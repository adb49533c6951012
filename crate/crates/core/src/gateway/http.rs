use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{Origin, PromptBundle, Provider, ProviderError};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "LEARNFLOW_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retries: u32,
    /// Delay before the first retry; doubled for each further retry.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpProviderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retries: 2,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpProvider {
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(config.timeout))
                .http_status_as_error(false)
                .build(),
        );
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpProviderConfig {
        &self.config
    }

    /// Request body in the chat-completions wire shape.
    pub fn request_body(&self, bundle: &PromptBundle) -> Value {
        let mut messages = Vec::with_capacity(bundle.messages.len() + 1);
        if !bundle.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": bundle.system_text}));
        }
        for m in &bundle.messages {
            let (role, content) = match m.origin {
                Origin::Instructor => ("user", format!("INSTRUCTOR: {}", m.text)),
                Origin::Learner => ("user", format!("LEARNER {}: {}", m.sender, m.text)),
                Origin::Agent => ("assistant", m.text.clone()),
            };
            messages.push(json!({"role": role, "content": content}));
        }
        let mut body = Map::new();
        body.insert("model".into(), Value::String(self.config.model.clone()));
        body.insert("messages".into(), Value::Array(messages));
        for (k, v) in &bundle.params {
            if k != "model" && k != "messages" {
                body.insert(k.clone(), v.clone());
            }
        }
        Value::Object(body)
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, invocation_id: &str, body: &Value) -> Result<String, Attempt> {
        let mut request = self
            .agent
            .post(&self.url())
            .header("Idempotency-Key", invocation_id);
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|_| Attempt::Transport)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|_| Attempt::Transport)?;
        if !(200..300).contains(&status) {
            let excerpt: String = text.chars().take(200).collect();
            let retryable = status == 429 || status >= 500;
            return Err(Attempt::Status {
                status,
                body: excerpt,
                retryable,
            });
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(ProviderError::Malformed(e.to_string())))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal(ProviderError::Malformed("missing choices[0].message.content".into())))
    }
}

enum Attempt {
    Transport,
    Status { status: u16, body: String, retryable: bool },
    Fatal(ProviderError),
}

impl Provider for HttpProvider {
    fn generate(&self, invocation_id: &str, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let body = self.request_body(bundle);
        let attempts = self.config.retries + 1;
        let mut delay = self.config.backoff;
        let mut last = ProviderError::Timeout { attempts };
        for attempt in 1..=attempts {
            match self.attempt(invocation_id, &body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Status {
                    status,
                    body,
                    retryable,
                }) => {
                    last = ProviderError::Status { status, body };
                    if !retryable {
                        return Err(last);
                    }
                }
                Err(Attempt::Transport) => last = ProviderError::Timeout { attempts },
            }
            if attempt < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Message;

    #[test]
    fn wire_shape_maps_origins() {
        let provider = HttpProvider::new(HttpProviderConfig::new("http://localhost:1/v1/", "m"));
        let bundle = PromptBundle {
            system_text: "You are a tutor.".into(),
            messages: vec![
                Message::new(Origin::Instructor, "instructor", "Ask."),
                Message::new(Origin::Agent, "tutor", "Q?"),
                Message::new(Origin::Learner, "learner-1", "A."),
            ],
            params: [("temperature".to_string(), json!(0.2))].into_iter().collect(),
        };
        let body = provider.request_body(&bundle);
        assert_eq!(
            body,
            json!({
                "model": "m",
                "messages": [
                    {"role": "system", "content": "You are a tutor."},
                    {"role": "user", "content": "INSTRUCTOR: Ask."},
                    {"role": "assistant", "content": "Q?"},
                    {"role": "user", "content": "LEARNER learner-1: A."}
                ],
                "temperature": 0.2
            })
        );
        assert_eq!(provider.url(), "http://localhost:1/v1/chat/completions");
    }
}
