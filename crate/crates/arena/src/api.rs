use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::{BytesRejection, PathRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use traffic_core::dqn::{AgentConfig, ConfigError};
use traffic_core::neural::{NetworkCheckpoint, QNetwork};

use crate::model::{leaderboard, now, Submission, SubmissionView};
use crate::session::{Event, SessionError, Sessions, StreamSettings, Subscription};
use crate::store::{Inserted, Store, StoreError};
use crate::worker::{Doorbell, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Limits {
    pub max_parameter_count: usize,
    pub max_training_steps: u64,
    /// experience_size × network input width.
    pub max_replay_values: usize,
    pub max_display_name_chars: usize,
    pub max_idempotency_key_chars: usize,
    pub max_body_bytes: usize,
    pub max_leaderboard_limit: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_parameter_count: 1_000_000,
            max_training_steps: 1_000_000,
            max_replay_values: 20_000_000,
            max_display_name_chars: 64,
            max_idempotency_key_chars: 128,
            max_body_bytes: 64 << 20,
            max_leaderboard_limit: 1000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub protocol: Protocol,
    pub limits: Limits,
    pub stream: StreamSettings,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<dyn Store>,
    settings: Arc<Settings>,
    sessions: Arc<Sessions>,
    doorbell: Option<Arc<Doorbell>>,
}

impl AppState {
    /// `doorbell` wakes the scoring workers after each new submission.
    pub fn new(store: Arc<dyn Store>, settings: Settings, doorbell: Option<Arc<Doorbell>>) -> Self {
        let sessions = Sessions::new(settings.stream, settings.protocol.world.clone());
        Self {
            store,
            settings: Arc::new(settings),
            sessions: Arc::new(sessions),
            doorbell,
        }
    }

    pub fn sessions(&self) -> &Sessions {
        &self.sessions
    }
}

/// Error body: `{"error": {"code", "message", "field"?, "limit"?}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
    limit: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
            limit: None,
        }
    }

    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.into()),
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
        }
    }

    fn over_limit(field: &str, limit: &'static str, value: impl std::fmt::Display, max: impl std::fmt::Display) -> Self {
        Self {
            field: Some(field.into()),
            limit: Some(limit),
            ..Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "limit_exceeded",
                format!("{field} is {value}, over the limit {limit} = {max}"),
            )
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!("{}", self.message);
        }
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            err["field"] = f.into();
        }
        if let Some(l) = self.limit {
            err["limit"] = l.into();
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::KeyConflict { .. } => Self {
                field: Some("idempotency_key".into()),
                ..Self::new(StatusCode::CONFLICT, "idempotency_conflict", e.to_string())
            },
            StoreError::NotFound(id) => Self::not_found(format!("no submission {id}")),
            other => Self::internal(other.to_string()),
        }
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        Self::new(r.status(), "bad_body", r.body_text())
    }
}

fn config_field(e: &ConfigError) -> String {
    if e.path == "$" || e.path.is_empty() {
        "config".into()
    } else {
        format!("config.{}", e.path)
    }
}

fn parse_body<T: DeserializeOwned + Default>(body: &[u8]) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_json(body)
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    let value = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::invalid(field, e.into_inner().to_string())
    })?;
    Ok(value)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(format!("request task failed: {e}"))))
}

fn path_id(p: Result<Path<String>, PathRejection>) -> Result<String, ApiError> {
    p.map(|Path(id)| id).map_err(|r| ApiError::not_found(r.body_text()))
}

pub fn router(state: AppState) -> Router {
    let max_body = state.settings.limits.max_body_bytes;
    Router::new()
        .route("/meta", get(meta))
        .route("/submissions", post(submit))
        .route("/submissions/{id}", get(get_submission))
        .route("/leaderboard", get(get_leaderboard))
        .route("/sessions", post(start_session))
        .route("/sessions/{id}", get(session_status).delete(cancel_session))
        .route("/sessions/{id}/frames", get(frames))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed here")
        })
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(state)
}

async fn meta(State(app): State<AppState>) -> Response {
    let s = &app.settings;
    Json(json!({
        "service": "traffic-arena",
        "version": env!("CARGO_PKG_VERSION"),
        "server_time": now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        "protocol": s.protocol,
        "limits": s.limits,
        "stream": s.stream,
        "config_defaults": AgentConfig::default(),
    }))
    .into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitRequest {
    display_name: String,
    config: Box<RawValue>,
    #[serde(default)]
    checkpoint: Option<NetworkCheckpoint>,
    #[serde(default)]
    idempotency_key: Option<String>,
}

/// Parse and check an agent config against the resource limits.
fn admit_config(raw: &str, limits: &Limits) -> Result<AgentConfig, ApiError> {
    let cfg = AgentConfig::from_json(raw).map_err(|e| ApiError::invalid(config_field(&e), e.to_string()))?;
    let params = cfg.parameter_count();
    if params > limits.max_parameter_count {
        return Err(ApiError::over_limit(
            "config.layers",
            "max_parameter_count",
            format!("{params} parameters"),
            limits.max_parameter_count,
        ));
    }
    if cfg.learning_steps_total > limits.max_training_steps {
        return Err(ApiError::over_limit(
            "config.learning_steps_total",
            "max_training_steps",
            cfg.learning_steps_total,
            limits.max_training_steps,
        ));
    }
    let replay = cfg.experience_size.saturating_mul(cfg.input_width());
    if replay > limits.max_replay_values {
        return Err(ApiError::over_limit(
            "config.experience_size",
            "max_replay_values",
            format!("{} × {} inputs", cfg.experience_size, cfg.input_width()),
            limits.max_replay_values,
        ));
    }
    Ok(cfg)
}

fn idempotency_key(headers: &HeaderMap, body_key: Option<String>, max: usize) -> Result<Option<String>, ApiError> {
    let header_key = match headers.get("idempotency-key") {
        Some(v) => Some(
            v.to_str()
                .map_err(|_| ApiError::invalid("Idempotency-Key", "must be visible ASCII"))?
                .to_string(),
        ),
        None => None,
    };
    let key = match (header_key, body_key) {
        (Some(h), Some(b)) if h != b => {
            return Err(ApiError::invalid(
                "idempotency_key",
                "differs from the Idempotency-Key header",
            ))
        }
        (h, b) => h.or(b),
    };
    if let Some(k) = &key {
        if k.is_empty() || k.chars().count() > max || k.chars().any(char::is_control) {
            return Err(ApiError::invalid(
                "idempotency_key",
                format!("must be 1 to {max} printable characters"),
            ));
        }
    }
    Ok(key)
}

async fn submit(
    State(app): State<AppState>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let body = body?;
    let limits = &app.settings.limits;
    let req: SubmitRequest = parse_json(&body)?;
    let name = req.display_name.trim().to_string();
    let name_chars = name.chars().count();
    if name_chars == 0 || name_chars > limits.max_display_name_chars || name.chars().any(char::is_control) {
        return Err(ApiError::invalid(
            "display_name",
            format!("must be 1 to {} printable characters", limits.max_display_name_chars),
        ));
    }
    let key = idempotency_key(&headers, req.idempotency_key, limits.max_idempotency_key_chars)?;
    let cfg = admit_config(req.config.get(), limits)?;
    if let Some(ck) = &req.checkpoint {
        let net = QNetwork::from_checkpoint(ck).map_err(|e| ApiError::invalid("checkpoint", e.to_string()))?;
        if net.spec() != &cfg.layer_spec() {
            return Err(ApiError::invalid(
                "checkpoint.layers",
                "checkpoint layers differ from the ones the config describes",
            ));
        }
    }
    let sub = Submission::new(
        uuid::Uuid::new_v4().simple().to_string(),
        name,
        req.config,
        req.checkpoint,
        key,
        cfg.parameter_count(),
    );
    let store = app.store.clone();
    let inserted = blocking(move || Ok(store.insert(sub)?)).await?;
    let (status, sub) = match inserted {
        Inserted::Created(s) => {
            if let Some(bell) = &app.doorbell {
                bell.ring();
            }
            (StatusCode::CREATED, s)
        }
        Inserted::Existing(s) => (StatusCode::OK, s),
    };
    let location = format!("/submissions/{}", sub.id);
    Ok((status, [(header::LOCATION, location)], Json(sub.view())).into_response())
}

async fn get_submission(
    State(app): State<AppState>,
    id: Result<Path<String>, PathRejection>,
) -> Result<Response, ApiError> {
    let id = path_id(id)?;
    let store = app.store.clone();
    let sub = blocking(move || Ok(store.get(&id)?.ok_or(StoreError::NotFound(id))?)).await?;
    Ok(Json::<SubmissionView>(sub.view()).into_response())
}

#[derive(Deserialize)]
struct BoardQuery {
    limit: Option<usize>,
}

async fn get_leaderboard(
    State(app): State<AppState>,
    q: Result<Query<BoardQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = q.map_err(|r| ApiError::invalid("limit", r.body_text()))?;
    let max = app.settings.limits.max_leaderboard_limit;
    let limit = q.limit.unwrap_or(100).min(max);
    let store = app.store.clone();
    let subs = blocking(move || Ok(store.list()?)).await?;
    Ok(Json(json!({ "entries": leaderboard(&subs, limit) })).into_response())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    config: Option<Box<RawValue>>,
    /// Train with the config of an existing submission.
    submission: Option<String>,
    steps: Option<u64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct SessionCreated {
    #[serde(flatten)]
    summary: crate::session::SessionSummary,
    frames: String,
}

async fn start_session(
    State(app): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    let body = body?;
    let req: SessionRequest = parse_body(&body)?;
    let limits = &app.settings.limits;
    let raw = match (req.config, req.submission) {
        (Some(_), Some(_)) => return Err(ApiError::invalid("submission", "give either config or submission")),
        (Some(c), None) => c.get().to_string(),
        (None, Some(id)) => {
            let store = app.store.clone();
            let sub = blocking(move || {
                store
                    .get(&id)?
                    .ok_or_else(|| ApiError::invalid("submission", format!("no submission {id}")))
            })
            .await?;
            sub.config.get().to_string()
        }
        (None, None) => "{}".to_string(),
    };
    let cfg = admit_config(&raw, limits)?;
    let steps = req.steps.unwrap_or(cfg.learning_steps_total);
    if steps > limits.max_training_steps {
        return Err(ApiError::over_limit(
            "steps",
            "max_training_steps",
            steps,
            limits.max_training_steps,
        ));
    }
    let summary = app
        .sessions
        .start(cfg, steps, req.seed.unwrap_or(app.settings.protocol.train_seed))
        .map_err(ApiError::too_many)?;
    let frames = format!("/sessions/{}/frames", summary.id);
    Ok((StatusCode::CREATED, Json(SessionCreated { summary, frames })).into_response())
}

impl ApiError {
    fn too_many(e: SessionError) -> Self {
        Self {
            limit: Some("max_live_sessions"),
            ..Self::new(StatusCode::TOO_MANY_REQUESTS, "too_many_sessions", e.to_string())
        }
    }
}

async fn session_status(
    State(app): State<AppState>,
    id: Result<Path<String>, PathRejection>,
) -> Result<Response, ApiError> {
    let id = path_id(id)?;
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    Ok(Json(s.summary()).into_response())
}

async fn cancel_session(
    State(app): State<AppState>,
    id: Result<Path<String>, PathRejection>,
) -> Result<Response, ApiError> {
    let id = path_id(id)?;
    let s = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    s.cancel();
    Ok((StatusCode::ACCEPTED, Json(s.summary())).into_response())
}

fn ndjson_line(ev: &Event) -> Result<Bytes, Infallible> {
    let mut line = String::with_capacity(ev.line.len() + 1);
    line.push_str(&ev.line);
    line.push('\n');
    Ok(Bytes::from(line))
}

/// Newline-delimited JSON: `frame` events while training runs, then one
/// `done` event. Readers join at the current frame.
async fn frames(State(app): State<AppState>, id: Result<Path<String>, PathRejection>) -> Result<Response, ApiError> {
    let id = path_id(id)?;
    let session = app.sessions.get(&id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    let body = match session.subscribe() {
        Subscription::Finished(ev) => Body::from(ndjson_line(&ev).unwrap_or_default()),
        Subscription::Live(rx) => {
            let stream = futures::stream::unfold(Some(rx), |rx| async move {
                let mut rx = rx?;
                loop {
                    match rx.recv().await {
                        Ok(ev) => {
                            let next = if ev.last { None } else { Some(rx) };
                            return Some((ndjson_line(&ev), next));
                        }
                        // Dropped the oldest frames; carry on from the newest.
                        Err(RecvError::Lagged(_)) => continue,
                        Err(RecvError::Closed) => return None,
                    }
                }
            });
            Body::from_stream(stream)
        }
    };
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-ndjson"),
            (header::CACHE_CONTROL, "no-cache"),
        ],
        body,
    )
        .into_response())
}
