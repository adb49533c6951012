use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::http::StatusCode;
use learnflow_core::engine::Engine;
use learnflow_core::flow::{to_document, Role, Source};
use learnflow_core::gateway::Provider;
use learnflow_core::log::{EventLog, SessionManifest};
use learnflow_core::{parse_flow, validate_flow, FlowDefinition};
use serde_json::json;
use tokio::sync::Mutex;

use crate::error::ApiError;
use crate::session::{Reply, Session};

/// Shared server state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

struct Shared {
    engine: Arc<Engine>,
    provider: Arc<dyn Provider>,
    data_dir: Option<PathBuf>,
    flows: RwLock<BTreeMap<String, Arc<FlowDefinition>>>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    /// Serializes flow and session creation; holds their `request_id` replies.
    creation: Mutex<HashMap<String, Reply>>,
}

impl AppState {
    pub fn new(engine: Engine, provider: Arc<dyn Provider>) -> Self {
        Self {
            shared: Arc::new(Shared {
                engine: Arc::new(engine),
                provider,
                data_dir: None,
                flows: RwLock::new(BTreeMap::new()),
                sessions: RwLock::new(HashMap::new()),
                creation: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// Persists flows and session logs under `data_dir`, loading the flows
    /// already stored there.
    pub fn with_data_dir(engine: Engine, provider: Arc<dyn Provider>, data_dir: PathBuf) -> std::io::Result<Self> {
        let mut flows = BTreeMap::new();
        let flow_dir = data_dir.join("flows");
        if flow_dir.is_dir() {
            for entry in std::fs::read_dir(&flow_dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                match parse_flow(&std::fs::read_to_string(&path)?) {
                    Ok(flow) if validate_flow(&flow).ok => {
                        flows.insert(flow.id.clone(), Arc::new(flow));
                    }
                    _ => tracing::warn!("skipping unusable flow file {}", path.display()),
                }
            }
        }
        Ok(Self {
            shared: Arc::new(Shared {
                engine: Arc::new(engine),
                provider,
                data_dir: Some(data_dir),
                flows: RwLock::new(flows),
                sessions: RwLock::new(HashMap::new()),
                creation: Mutex::new(HashMap::new()),
            }),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.shared.engine
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.shared.provider
    }

    pub fn flow(&self, id: &str) -> Option<Arc<FlowDefinition>> {
        self.shared.flows.read().expect("flow lock").get(id).cloned()
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.shared.sessions.read().expect("session lock").get(id).cloned()
    }

    pub(crate) async fn idempotent<F>(&self, request_id: Option<&str>, scope: &str, f: F) -> Reply
    where
        F: FnOnce(&Self) -> Reply,
    {
        let mut replies = self.shared.creation.lock().await;
        let key = request_id.map(|r| format!("{scope}:{r}"));
        if let Some(reply) = key.as_ref().and_then(|k| replies.get(k)) {
            return reply.clone();
        }
        let reply = f(self);
        if let Some(k) = key {
            replies.insert(k, reply.clone());
        }
        reply
    }

    /// Stores a valid flow; the report is returned either way.
    pub(crate) fn create_flow(&self, document: &str) -> Result<Reply, ApiError> {
        let flow = parse_flow(document).map_err(|e| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string())
        })?;
        let report = validate_flow(&flow);
        let report_json = serde_json::to_value(&report).expect("reports serialize");
        if !report.ok {
            let first = report.errors().next().map(|d| d.code.clone()).unwrap_or_default();
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "ValidationFailed",
                format!("flow `{}` failed validation ({first})", flow.id),
            )
            .with_details(json!({"report": report_json})));
        }
        let mut flows = self.shared.flows.write().expect("flow lock");
        if flows.contains_key(&flow.id) {
            return Err(ApiError::new(StatusCode::CONFLICT, "DuplicateFlow", format!("flow `{}` already exists", flow.id)));
        }
        if let Some(dir) = &self.shared.data_dir {
            let dir = dir.join("flows");
            std::fs::create_dir_all(&dir)
                .and_then(|_| std::fs::write(dir.join(format!("{}.json", flow.id)), to_document(&flow)))
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure", e.to_string()))?;
        }
        let id = flow.id.clone();
        flows.insert(id.clone(), Arc::new(flow));
        Ok((StatusCode::CREATED, json!({"id": id, "report": report_json})))
    }

    /// Starts a session and issues one token per human slot.
    pub(crate) fn create_session(
        &self,
        flow_id: &str,
        overrides: &BTreeMap<String, Source>,
    ) -> Result<(Arc<Session>, Reply), ApiError> {
        let flow = self.flow(flow_id).ok_or_else(|| ApiError::unknown_flow(flow_id))?;
        let session_id = loop {
            let id = format!("s-{}", &new_token()[..12]);
            if self.session(&id).is_none() {
                break id;
            }
        };
        let state = self
            .shared
            .engine
            .start_session(&session_id, (*flow).clone(), overrides)?;

        let mut tokens = HashMap::new();
        for slot in &flow.roster {
            let source = overrides.get(&slot.slot_id).copied().unwrap_or(slot.effective_source());
            if slot.role != Role::AiAgent && source == Source::Human {
                tokens.insert(new_token(), slot.slot_id.clone());
            }
        }

        let log = match &self.shared.data_dir {
            Some(dir) => {
                let manifest = SessionManifest {
                    session_id: session_id.clone(),
                    flow: (*flow).clone(),
                    overrides: overrides.clone(),
                };
                let storage = |e: learnflow_core::log::LogError| {
                    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageFailure", e.to_string())
                };
                manifest.write(dir).map_err(storage)?;
                Some(EventLog::create(dir, &session_id).map_err(storage)?)
            }
            None => None,
        };

        let by_slot: BTreeMap<&str, &str> = tokens.iter().map(|(t, s)| (s.as_str(), t.as_str())).collect();
        let body = json!({"session_id": session_id, "tokens": by_slot});
        let session = Arc::new(Session::new(state, flow, tokens, log));
        self.shared
            .sessions
            .write()
            .expect("session lock")
            .insert(session_id, session.clone());
        Ok((session, (StatusCode::CREATED, body)))
    }
}

/// 128 random bits as lowercase hex.
pub(crate) fn new_token() -> String {
    format!("{:032x}", rand::random::<u128>())
}
