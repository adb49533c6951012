#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use learnflow_core::gateway::{PromptBundle, Provider, ProviderError, StubProvider};
use learnflow_core::{ContentStore, Engine, FixedClock};
use learnflow_server::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub fn engine() -> Engine {
    Engine::new(Arc::new(ContentStore::new()), Arc::new(FixedClock::default()))
}

pub fn quiz_script() -> Vec<String> {
    let mut script = Vec::new();
    for i in 1..=10 {
        script.push(format!("Question {i}: which factor limits population growth?"));
        script.push("INCORRECT. The correct answer is c) Food competition.".to_string());
    }
    script.push("Final feedback.".to_string());
    script
}

/// Holds every call until `open` is called.
pub struct GatedProvider {
    inner: StubProvider,
    open: Mutex<bool>,
    cv: Condvar,
}

impl GatedProvider {
    pub fn new(inner: StubProvider) -> Self {
        Self {
            inner,
            open: Mutex::new(false),
            cv: Condvar::new(),
        }
    }

    pub fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl Provider for GatedProvider {
    fn generate(&self, invocation_id: &str, bundle: &PromptBundle) -> Result<String, ProviderError> {
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        drop(open);
        self.inner.generate(invocation_id, bundle)
    }
}

#[derive(Clone)]
pub struct Client {
    pub app: Router,
}

impl Client {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            app: router(AppState::new(engine(), provider)),
        }
    }

    pub fn stub(responses: Vec<String>) -> Self {
        Self::new(Arc::new(StubProvider::from_responses(responses)))
    }

    pub async fn raw(
        &self,
        method: Method,
        uri: &str,
        token: Option<&str>,
        headers: &[(&str, &str)],
        body: String,
    ) -> (StatusCode, Vec<u8>) {
        let mut request = Request::builder().method(method).uri(uri);
        if let Some(token) = token {
            request = request.header("authorization", format!("Bearer {token}"));
        }
        for (name, value) in headers {
            request = request.header(*name, *value);
        }
        let response = self
            .app
            .clone()
            .oneshot(request.body(Body::from(body)).unwrap())
            .await
            .unwrap();
        let status = response.status();
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        (status, bytes.to_vec())
    }

    pub async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        let (status, bytes) = self.raw(method, uri, token, &[], body).await;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn get(&self, uri: &str, token: Option<&str>) -> (StatusCode, Value) {
        self.call(Method::GET, uri, token, None).await
    }

    pub async fn post(&self, uri: &str, token: Option<&str>, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, token, Some(body)).await
    }

    pub async fn post_flow(&self, document: &str) -> (StatusCode, Value) {
        let (status, bytes) = self.raw(Method::POST, "/v1/flows", None, &[], document.to_string()).await;
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    /// Registers a flow and starts a session; returns `(session_id, slot -> token)`.
    pub async fn start(&self, document: &str, overrides: Value) -> (String, BTreeMap<String, String>) {
        let flow_id = learnflow_core::parse_flow(document).unwrap().id;
        if self.get(&format!("/v1/flows/{flow_id}"), None).await.0 == StatusCode::NOT_FOUND {
            let (status, body) = self.post_flow(document).await;
            assert_eq!(status, StatusCode::CREATED, "{body}");
        }
        let (status, body) = self
            .post(
                "/v1/sessions",
                None,
                serde_json::json!({"flow_id": flow_id, "roster_overrides": overrides}),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        let tokens = serde_json::from_value(body["tokens"].clone()).unwrap();
        (body["session_id"].as_str().unwrap().to_string(), tokens)
    }

    pub async fn state(&self, session: &str, token: &str) -> Value {
        let (status, body) = self.get(&format!("/v1/sessions/{session}/state"), Some(token)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body
    }

    /// Polls the state endpoint until `pred` holds.
    pub async fn wait_until(&self, session: &str, token: &str, pred: impl Fn(&Value) -> bool) -> Value {
        for _ in 0..500 {
            let state = self.state(session, token).await;
            if pred(&state) {
                return state;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("session {session} never reached the expected state");
    }

    /// Waits until the session awaits input or has stopped.
    pub async fn settle(&self, session: &str, token: &str) -> Value {
        self.wait_until(session, token, |s| {
            let st = s["status"]["state"].as_str().unwrap_or_default();
            st == "awaiting_input" || st == "completed" || st == "ended_by_instructor"
        })
        .await
    }

    pub async fn events(&self, session: &str, token: &str, since: u64) -> Vec<Value> {
        let (status, body) = self
            .get(&format!("/v1/sessions/{session}/events?since={since}"), Some(token))
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["events"].as_array().unwrap().clone()
    }

    /// Reads the SSE stream to its end and returns the decoded `data:` frames.
    pub async fn stream(&self, session: &str, token: &str) -> Vec<Value> {
        let (status, bytes) = self
            .raw(Method::GET, &format!("/v1/sessions/{session}/stream"), Some(token), &[], String::new())
            .await;
        assert_eq!(status, StatusCode::OK);
        sse_data(&String::from_utf8(bytes).unwrap())
    }

    /// Follows the long-poll feed from 0 until the session is terminal.
    pub async fn long_poll_all(&self, session: &str, token: &str) -> Vec<Value> {
        let mut since = 0;
        let mut out = Vec::new();
        loop {
            let (status, body) = self
                .get(&format!("/v1/sessions/{session}/events?since={since}&wait=5"), Some(token))
                .await;
            assert_eq!(status, StatusCode::OK, "{body}");
            out.extend(body["events"].as_array().unwrap().iter().cloned());
            since = body["last_seq"].as_u64().unwrap();
            if body["terminal"].as_bool().unwrap() {
                let rest = self.events(session, token, since).await;
                out.extend(rest);
                return out;
            }
        }
    }

    /// Answers whichever slot is awaited with `answer(slot, n)` until the
    /// session stops.
    pub async fn play(
        &self,
        session: &str,
        tokens: &BTreeMap<String, String>,
        mut answer: impl FnMut(&str, usize) -> String,
    ) -> Value {
        let instructor = &tokens["instructor"];
        let mut n = 0;
        loop {
            let state = self.settle(session, instructor).await;
            if state["status"]["state"] != "awaiting_input" {
                return state;
            }
            let slot = state["status"]["slot_id"].as_str().unwrap().to_string();
            let (status, body) = self
                .post(
                    &format!("/v1/sessions/{session}/input"),
                    Some(&tokens[&slot]),
                    serde_json::json!({"content": answer(&slot, n)}),
                )
                .await;
            assert_eq!(status, StatusCode::OK, "{body}");
            n += 1;
        }
    }
}

pub fn sse_data(text: &str) -> Vec<Value> {
    text.lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| serde_json::from_str(d.trim_start()).unwrap())
        .collect()
}

/// Everything but the timestamp.
pub fn strip_ts(events: &[Value]) -> Vec<Value> {
    events
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let fields = e.as_object_mut().unwrap();
            fields.remove("ts");
            fields.remove("timestamp");
            e
        })
        .collect()
}
