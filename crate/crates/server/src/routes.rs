use std::collections::{BTreeMap, VecDeque};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use learnflow_core::{ControlAction, Event, Source};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;

use crate::app::AppState;
use crate::error::ApiError;
use crate::session::{Progress, Reply, Session};

const MAX_WAIT_SECS: f64 = 60.0;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/flows", post(create_flow))
        .route("/v1/flows/{id}", get(get_flow))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/sessions/{id}/stream", get(stream))
        .route("/v1/sessions/{id}/input", post(input))
        .route("/v1/sessions/{id}/control", post(control))
        .route("/v1/sessions/{id}/state", get(session_state))
        .with_state(state)
}

fn reply(r: Reply) -> Response {
    (r.0, Json(r.1)).into_response()
}

fn as_reply(result: Result<Reply, ApiError>) -> Reply {
    result.unwrap_or_else(|e| (e.status, e.body()))
}

fn request_id(headers: &HeaderMap, body: Option<&Value>) -> Option<String> {
    body.and_then(|b| b.get("request_id"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .or_else(|| {
            ["request_id", "request-id", "x-request-id"]
                .iter()
                .find_map(|name| headers.get(*name))
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
}

fn json_body(body: &str) -> Result<Value, ApiError> {
    let value: Value = serde_json::from_str(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))?;
    if !value.is_object() {
        return Err(ApiError::bad_request("body must be a JSON object"));
    }
    Ok(value)
}

fn field<T: for<'de> Deserialize<'de>>(body: &Value) -> Result<T, ApiError> {
    serde_json::from_value(body.clone()).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Looks the session up first, then maps the bearer token to its slot.
fn authorize(state: &AppState, id: &str, headers: &HeaderMap) -> Result<(Arc<Session>, String), ApiError> {
    let session = state.session(id).ok_or_else(|| ApiError::unknown_session(id))?;
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or_else(ApiError::unauthorized)?;
    let slot = session.slot_for(token).ok_or_else(ApiError::unauthorized)?.to_string();
    Ok((session, slot))
}

fn spawn_drive(state: &AppState, session: Arc<Session>) {
    tokio::spawn(session.drive(state.engine().clone(), state.provider().clone()));
}

async fn create_flow(State(state): State<AppState>, headers: HeaderMap, body: String) -> Response {
    let rid = request_id(&headers, None);
    reply(state.idempotent(rid.as_deref(), "flow", |s| as_reply(s.create_flow(&body))).await)
}

async fn get_flow(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.flow(&id) {
        Some(flow) => {
            let document: Value = serde_json::from_str(&learnflow_core::flow::to_document(&flow)).expect("documents are JSON");
            (StatusCode::OK, Json(document)).into_response()
        }
        None => ApiError::unknown_flow(&id).into_response(),
    }
}

#[derive(Deserialize)]
struct NewSession {
    flow_id: String,
    #[serde(default)]
    roster_overrides: BTreeMap<String, Source>,
}

async fn create_session(State(state): State<AppState>, headers: HeaderMap, body: String) -> Response {
    let parsed = json_body(&body).and_then(|b| Ok((request_id(&headers, Some(&b)), field::<NewSession>(&b)?)));
    let (rid, request) = match parsed {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    let r = state
        .idempotent(rid.as_deref(), "session", |s| {
            as_reply(s.create_session(&request.flow_id, &request.roster_overrides).map(|(session, r)| {
                spawn_drive(s, session);
                r
            }))
        })
        .await;
    reply(r)
}

#[derive(Deserialize)]
struct FeedQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    wait: f64,
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<FeedQuery>,
    headers: HeaderMap,
) -> Response {
    let (session, slot) = match authorize(&state, &id, &headers) {
        Ok(a) => a,
        Err(e) => return e.into_response(),
    };
    let wait = Duration::from_secs_f64(q.wait.clamp(0.0, MAX_WAIT_SECS));
    let deadline = tokio::time::Instant::now() + wait;
    let mut rx = session.subscribe();
    loop {
        let progress = *rx.borrow_and_update();
        let (events, upto) = session.visible_since(&slot, q.since);
        if !events.is_empty() || progress.terminal || wait.is_zero() {
            return feed(events, upto.max(q.since), progress.terminal);
        }
        match tokio::time::timeout_at(deadline, rx.changed()).await {
            Ok(Ok(())) => continue,
            _ => return feed(Vec::new(), upto.max(q.since), progress.terminal),
        }
    }
}

fn feed(events: Vec<Event>, last_seq: u64, terminal: bool) -> Response {
    (
        StatusCode::OK,
        Json(json!({"events": events, "last_seq": last_seq, "terminal": terminal})),
    )
        .into_response()
}

struct StreamState {
    session: Arc<Session>,
    slot: String,
    cursor: u64,
    buffer: VecDeque<Event>,
    rx: watch::Receiver<Progress>,
}

async fn stream(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<FeedQuery>,
    headers: HeaderMap,
) -> Response {
    let (session, slot) = match authorize(&state, &id, &headers) {
        Ok(a) => a,
        Err(e) => return e.into_response(),
    };
    let since = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .unwrap_or(q.since);
    let rx = session.subscribe();
    let start = StreamState {
        session,
        slot,
        cursor: since,
        buffer: VecDeque::new(),
        rx,
    };
    Sse::new(sse_frames(start)).keep_alive(KeepAlive::default()).into_response()
}

fn sse_frames(start: StreamState) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    futures::stream::unfold(start, |mut st| async move {
        loop {
            if let Some(event) = st.buffer.pop_front() {
                let frame = SseEvent::default()
                    .id(event.seq.to_string())
                    .data(serde_json::to_string(&event).expect("events serialize"));
                return Some((Ok(frame), st));
            }
            let progress = *st.rx.borrow_and_update();
            let (events, upto) = st.session.visible_since(&st.slot, st.cursor);
            st.cursor = upto.max(st.cursor);
            if !events.is_empty() {
                st.buffer.extend(events);
                continue;
            }
            if progress.terminal || st.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn input(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: String) -> Response {
    let (session, slot) = match authorize(&state, &id, &headers) {
        Ok(a) => a,
        Err(e) => return e.into_response(),
    };
    let body = match json_body(&body) {
        Ok(b) => b,
        Err(e) => return e.into_response(),
    };
    let Some(content) = body.get("content").and_then(Value::as_str) else {
        return ApiError::bad_request("`content` must be a string").into_response();
    };
    let key = request_id(&headers, Some(&body)).map(|r| format!("input:{slot}:{r}"));
    let mut inner = session.inner.lock().await;
    if let Some(r) = key.as_ref().and_then(|k| inner.replies.get(k)) {
        return reply(r.clone());
    }
    let result = state.engine().submit_input(&mut inner.state, &slot, content);
    let r = match result {
        Ok(events) => {
            session.publish(&mut inner, &events);
            let seq = events.first().map(|e| e.seq);
            (StatusCode::OK, json!({"seq": seq}))
        }
        Err(e) => as_reply(Err(e.into())),
    };
    if let Some(k) = key {
        inner.replies.insert(k, r.clone());
    }
    drop(inner);
    if r.0.is_success() {
        spawn_drive(&state, session);
    }
    reply(r)
}

#[derive(Deserialize)]
struct ControlRequest {
    action: String,
    text: Option<String>,
}

fn control_action(request: ControlRequest) -> Result<ControlAction, ApiError> {
    Ok(match request.action.as_str() {
        "advance" => ControlAction::Advance { text: request.text },
        "skip_step" => ControlAction::SkipStep,
        "end" => ControlAction::End,
        "override_response" => ControlAction::OverrideResponse {
            text: request
                .text
                .ok_or_else(|| ApiError::bad_request("override_response needs `text`"))?,
        },
        other => return Err(ApiError::bad_request(format!("unknown action `{other}`"))),
    })
}

async fn control(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: String) -> Response {
    let (session, slot) = match authorize(&state, &id, &headers) {
        Ok(a) => a,
        Err(e) => return e.into_response(),
    };
    let is_instructor = session
        .flow
        .roster
        .iter()
        .any(|s| s.slot_id == slot && s.role == learnflow_core::flow::Role::Instructor);
    if !is_instructor {
        return ApiError::forbidden("only the instructor may use controls").into_response();
    }
    let body = match json_body(&body) {
        Ok(b) => b,
        Err(e) => return e.into_response(),
    };
    let action = match field::<ControlRequest>(&body).and_then(control_action) {
        Ok(a) => a,
        Err(e) => return e.into_response(),
    };
    let key = request_id(&headers, Some(&body)).map(|r| format!("control:{r}"));
    let mut inner = session.inner.lock().await;
    if let Some(r) = key.as_ref().and_then(|k| inner.replies.get(k)) {
        return reply(r.clone());
    }
    let r = match state.engine().control(&mut inner.state, &action) {
        Ok(events) => {
            session.publish(&mut inner, &events);
            (StatusCode::OK, json!({"status": inner.state.status}))
        }
        Err(e) => as_reply(Err(e.into())),
    };
    if let Some(k) = key {
        inner.replies.insert(k, r.clone());
    }
    drop(inner);
    if r.0.is_success() {
        spawn_drive(&state, session);
    }
    reply(r)
}

async fn session_state(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let (session, _) = match authorize(&state, &id, &headers) {
        Ok(a) => a,
        Err(e) => return e.into_response(),
    };
    let inner = session.inner.lock().await;
    (StatusCode::OK, Json(session.summary(&inner))).into_response()
}
