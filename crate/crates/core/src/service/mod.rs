//! HTTP service for interactive sessions: players pick tiles, then watch (or
//! steer) the refinement loop through a server-sent event stream.

pub mod session;

pub use session::{IterationEvent, LoopMode, Session, SessionError, SessionState};

use crate::domain::{ElementKind, TileCatalog, CATALOG_SCHEMA_VERSION};
use crate::engine::{Engine, LoopConfig};
use crate::gateway::ModelHandle;
use crate::harness::store::write_atomic;
use crate::prompts::DEFAULT_IDLE_THRESHOLD;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::sync::{broadcast, watch};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> ManualClock {
        ManualClock(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        let mut t = self.0.lock().unwrap();
        *t += chrono::Duration::from_std(by).expect("duration in range");
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub loop_config: LoopConfig,
    pub idle_threshold: Duration,
    /// Every session change is written to `<dir>/<id>.json`.
    pub persist_dir: Option<PathBuf>,
    /// Static frontend bundle served for unmatched paths.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            loop_config: LoopConfig::default(),
            idle_threshold: DEFAULT_IDLE_THRESHOLD,
            persist_dir: None,
            static_dir: None,
        }
    }
}

/// Models the service talks to.
#[derive(Debug, Clone)]
pub struct ServiceModels {
    pub writer: ModelHandle,
    pub editor: ModelHandle,
    /// Answers guidance-hint prompts.
    pub guide: ModelHandle,
}

#[derive(Debug, Clone, Serialize)]
struct ServerEvent {
    id: u64,
    kind: &'static str,
    data: Value,
}

struct Slot {
    session: tokio::sync::Mutex<Session>,
    log: Mutex<Vec<ServerEvent>>,
    tx: broadcast::Sender<ServerEvent>,
    state: watch::Sender<SessionState>,
}

impl Slot {
    /// Appends to the replay log and broadcasts. Call with the session lock held.
    fn publish(&self, kind: &'static str, data: Value) {
        let mut log = self.log.lock().unwrap();
        let event = ServerEvent {
            id: log.len() as u64 + 1,
            kind,
            data,
        };
        log.push(event.clone());
        let _ = self.tx.send(event);
    }
}

pub struct ServiceState {
    engine: Engine,
    catalog: Arc<TileCatalog>,
    models: ServiceModels,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
}

impl ServiceState {
    pub fn new(engine: Engine, catalog: TileCatalog, models: ServiceModels, config: ServiceConfig) -> ServiceState {
        ServiceState::with_clock(engine, catalog, models, config, Arc::new(SystemClock))
    }

    pub fn with_clock(
        engine: Engine,
        catalog: TileCatalog,
        models: ServiceModels,
        config: ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> ServiceState {
        ServiceState {
            engine,
            catalog: Arc::new(catalog),
            models,
            config,
            clock,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, SessionError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    fn persist(&self, session: &Session) {
        if let Some(dir) = &self.config.persist_dir {
            let path = dir.join(format!("{}.json", session.id));
            let written = std::fs::create_dir_all(dir)
                .map_err(|e| e.to_string())
                .and_then(|_| {
                    let bytes = serde_json::to_vec_pretty(session).expect("session serialises");
                    write_atomic(&path, &bytes).map_err(|e| e.to_string())
                });
            if let Err(e) = written {
                tracing::error!(session = %session.id, error = %e, "session not persisted");
            }
        }
    }
}

/// Error body: `{"error": {"code": "...", "message": "..."}}`.
pub struct ApiError(pub SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::InvalidKind(_)
            | SessionError::InvalidLabel { .. }
            | SessionError::BadIndex { .. }
            | SessionError::BadRequest(_) => StatusCode::BAD_REQUEST,
            SessionError::DuplicateKind(_) | SessionError::WrongState { .. } | SessionError::MaxLoopsReached(_) => {
                StatusCode::CONFLICT
            }
            SessionError::Upstream(_) => StatusCode::BAD_GATEWAY,
        };
        let body = json!({"error": {"code": self.0.code(), "message": self.0.to_string()}});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationView {
    pub loop_index: u32,
    pub story: String,
    pub score: f64,
    pub rationale: String,
}

/// What clients see of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub state: SessionState,
    pub tiles: std::collections::BTreeMap<String, String>,
    pub next_stage: Option<String>,
    pub mode: Option<LoopMode>,
    pub max_loops: u32,
    pub iterations: Vec<IterationView>,
    pub recommended: Option<u32>,
    pub accepted: Option<u32>,
    pub failure: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        SessionView {
            id: s.id.clone(),
            state: s.state,
            tiles: s.tiles.iter().map(|(k, v)| (k.key().to_string(), v.clone())).collect(),
            next_stage: (s.state == SessionState::Selecting)
                .then(|| s.next_stage().map(|k| k.key().to_string()))
                .flatten(),
            mode: s.mode,
            max_loops: s.max_loops,
            iterations: s
                .critiques()
                .into_iter()
                .map(|(story, c)| IterationView {
                    loop_index: story.loop_index,
                    story: story.text.clone(),
                    score: c.score,
                    rationale: c.rationale.clone(),
                })
                .collect(),
            recommended: s.recommended(),
            accepted: s.accepted,
            failure: s.failure.clone(),
            created_at: s.created_at,
            updated_at: s.updated_at,
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let router = Router::new()
        .route("/catalog", get(catalog))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(snapshot))
        .route("/sessions/{id}/tiles", post(submit_tile))
        .route("/sessions/{id}/hint", get(hint))
        .route("/sessions/{id}/loop", post(start_loop))
        .route("/sessions/{id}/continue", post(continue_loop))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/events", get(events))
        .with_state(state);
    match static_dir {
        Some(dir) => router.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => router,
    }
}

pub async fn serve(state: Arc<ServiceState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await
}

async fn catalog(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let kinds: Vec<Value> = ElementKind::ALL
        .into_iter()
        .map(|k| {
            json!({
                "kind": k.key(),
                "display_name": k.display_name(),
                "player_selected": k.is_player_selected(),
                "labels": state.catalog.labels(k),
            })
        })
        .collect();
    Json(json!({"schema_version": CATALOG_SCHEMA_VERSION, "kinds": kinds}))
}

async fn create_session(State(state): State<Arc<ServiceState>>) -> (StatusCode, Json<SessionView>) {
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::new(id.clone(), state.config.loop_config.max_loops, state.clock.now());
    let view = SessionView::from(&session);
    state.persist(&session);
    let (tx, _) = broadcast::channel(256);
    let slot = Arc::new(Slot {
        session: tokio::sync::Mutex::new(session),
        log: Mutex::new(Vec::new()),
        tx,
        state: watch::channel(SessionState::Selecting).0,
    });
    state.sessions.lock().unwrap().insert(id, slot);
    (StatusCode::CREATED, Json(view))
}

async fn snapshot(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let slot = state.slot(&id)?;
    let s = slot.session.lock().await;
    Ok(Json(SessionView::from(&*s)))
}

#[derive(Debug, Deserialize)]
struct TileRequest {
    kind: String,
    label: String,
}

async fn submit_tile(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<TileRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let Json(req) = body.map_err(|e| SessionError::BadRequest(e.body_text()))?;
    let slot = state.slot(&id)?;
    let mut s = slot.session.lock().await;
    s.submit_tile(&req.kind, &req.label, &state.catalog, state.clock.now())?;
    if s.state == SessionState::Ready {
        slot.publish("state", json!({"state": s.state}));
        slot.state.send_replace(s.state);
    }
    state.persist(&s);
    Ok(Json(SessionView::from(&*s)))
}

async fn hint(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let ctx = {
        let s = slot.session.lock().await;
        s.hint_context(state.clock.now(), state.config.idle_threshold)?
    };
    let prompt = state.engine.forge().render_guidance_hint(&ctx);
    let text = state
        .engine
        .gateway()
        .complete(&state.models.guide, &prompt)
        .await
        .map_err(|e| SessionError::Upstream(e.to_string()))?;
    Ok(Json(json!({
        "stage": ctx.stage.key(),
        "escalated": ctx.escalated(),
        "idle_secs": ctx.idle.as_secs_f64(),
        "hint": text.trim(),
    })))
}

#[derive(Debug, Default, Deserialize)]
struct LoopQuery {
    mode: Option<String>,
    /// Only honoured before the first iteration.
    max_loops: Option<u32>,
    /// Respond only once the loop has paused, failed or finished.
    #[serde(default)]
    wait: bool,
}

async fn start_loop(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<LoopQuery>,
) -> ApiResult<Json<SessionView>> {
    let mode: LoopMode = match q.mode.as_deref() {
        None => LoopMode::Steer,
        Some(m) => m.parse().map_err(SessionError::BadRequest)?,
    };
    let slot = state.slot(&id)?;
    let mut config = state.config.loop_config;
    {
        let mut s = slot.session.lock().await;
        if let Some(n) = q.max_loops {
            if n == 0 {
                return Err(SessionError::BadRequest("max_loops must be at least 1".into()).into());
            }
            if s.iteration_count() == 0 {
                s.max_loops = n;
            }
        }
        config.max_loops = s.max_loops;
        s.start_loop(mode, &state.models.writer.name, &state.models.editor.name, state.clock.now())?;
        launch(&state, &slot, &mut s, mode, config);
    }
    finish_request(&slot, q.wait).await
}

#[derive(Debug, Default, Deserialize)]
struct WaitQuery {
    #[serde(default)]
    wait: bool,
}

async fn continue_loop(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<WaitQuery>,
) -> ApiResult<Json<SessionView>> {
    let slot = state.slot(&id)?;
    {
        let mut s = slot.session.lock().await;
        s.continue_loop(state.clock.now())?;
        let mut config = state.config.loop_config;
        config.max_loops = s.max_loops;
        launch(&state, &slot, &mut s, LoopMode::Steer, config);
    }
    finish_request(&slot, q.wait).await
}

fn launch(state: &Arc<ServiceState>, slot: &Arc<Slot>, s: &mut Session, mode: LoopMode, config: LoopConfig) {
    slot.publish("state", json!({"state": s.state, "mode": mode}));
    slot.state.send_replace(s.state);
    state.persist(s);
    tokio::spawn(drive(state.clone(), slot.clone(), mode, config));
}

async fn finish_request(slot: &Arc<Slot>, wait: bool) -> ApiResult<Json<SessionView>> {
    if wait {
        let mut rx = slot.state.subscribe();
        // The sender lives in the slot, so this cannot close early.
        let _ = rx.wait_for(|s| *s != SessionState::Looping).await;
    }
    let s = slot.session.lock().await;
    Ok(Json(SessionView::from(&*s)))
}

/// Background loop for one session. Iterations run without the session lock.
async fn drive(state: Arc<ServiceState>, slot: Arc<Slot>, mode: LoopMode, config: LoopConfig) {
    loop {
        let trace = {
            let s = slot.session.lock().await;
            s.trace.clone().expect("looping sessions have a trace")
        };
        let result = state
            .engine
            .extend(&state.models.writer, &state.models.editor, &trace, &config)
            .await;
        let mut s = slot.session.lock().await;
        let now = state.clock.now();
        let stop = match result {
            Ok(iteration) => match s.record_iteration(iteration, now) {
                Ok(event) => {
                    slot.publish("iteration", serde_json::to_value(&event).expect("event serialises"));
                    let scores = s.trace.as_ref().map(|t| t.scores()).unwrap_or_default();
                    if mode == LoopMode::Steer || config.should_stop(&scores) {
                        s.pause(now).expect("looping with an iteration");
                        slot.publish(
                            "state",
                            json!({"state": s.state, "recommended": s.recommended()}),
                        );
                        true
                    } else {
                        false
                    }
                }
                Err(e) => fail(&slot, &mut s, e.to_string(), now),
            },
            Err(e) => fail(&slot, &mut s, e.to_string(), now),
        };
        state.persist(&s);
        if stop {
            slot.state.send_replace(s.state);
            return;
        }
    }
}

fn fail(slot: &Slot, s: &mut Session, reason: String, now: DateTime<Utc>) -> bool {
    tracing::warn!(session = %s.id, %reason, "session loop failed");
    s.fail(reason.clone(), now).expect("looping");
    slot.publish("failed", json!({"state": s.state, "reason": reason}));
    true
}

#[derive(Debug, Default, Deserialize)]
struct AcceptRequest {
    index: Option<u32>,
}

async fn accept(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<Value>> {
    let req: AcceptRequest = if body.iter().all(u8::is_ascii_whitespace) {
        AcceptRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| SessionError::BadRequest(e.to_string()))?
    };
    let slot = state.slot(&id)?;
    let mut s = slot.session.lock().await;
    let story = s.accept(req.index, state.clock.now())?;
    slot.publish("state", json!({"state": s.state, "accepted": s.accepted}));
    slot.state.send_replace(s.state);
    state.persist(&s);
    Ok(Json(json!({"story": story, "session": SessionView::from(&*s)})))
}

fn to_sse(e: ServerEvent) -> Result<Event, Infallible> {
    Ok(Event::default()
        .id(e.id.to_string())
        .event(e.kind)
        .data(e.data.to_string()))
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    last_event_id: Option<u64>,
}

/// Replays logged events after `Last-Event-ID` (header or query), then follows live.
async fn events(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = state.slot(&id)?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(q.last_event_id)
        .unwrap_or(0u64);
    let rx = slot.tx.subscribe();
    let backlog: VecDeque<ServerEvent> = slot
        .log
        .lock()
        .unwrap()
        .iter()
        .filter(|e| e.id > after)
        .cloned()
        .collect();
    let high = backlog.back().map_or(after, |e| e.id);
    let live = futures::stream::unfold(
        (rx, high, VecDeque::<ServerEvent>::new(), slot),
        |(mut rx, high, mut pending, slot)| async move {
            loop {
                if let Some(e) = pending.pop_front() {
                    let id = e.id;
                    return Some((e, (rx, id, pending, slot)));
                }
                match rx.recv().await {
                    Ok(e) if e.id > high => return Some((e.clone(), (rx, e.id, pending, slot))),
                    Ok(_) => continue,
                    Err(broadcast::error::RecvError::Lagged(_)) => {
                        pending = slot.log.lock().unwrap().iter().filter(|e| e.id > high).cloned().collect();
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        },
    );
    let stream = futures::stream::iter(backlog).chain(live).map(to_sse);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
