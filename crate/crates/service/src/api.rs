//! HTTP API: episode orchestration, escalation queue, metrics.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use loopguard_core::detector::{
    DetectorConfig, EscalationChannel, EscalationError, EscalationQueue, EscalationRequest, MllmDetector, Resolution,
};
use loopguard_core::domain::{Outcome, StepRecord, TaskSpec};
use loopguard_core::eval::{episode_metrics, EpisodeMetrics};
use loopguard_core::planner::{episode_seeds, run_episode, EpisodeContext, SimEnv, SimEnvConfig};
use loopguard_core::prompting::StrategyKind;
use loopguard_core::uncertainty::Method;

use crate::config::{BackendFactory, ConfigError, ServiceConfig};
use crate::store::{EpisodeEvent, EpisodeSettings, EpisodeStatus, EpisodeStore, EpisodeView, EventKind, StoreError};

const DEFAULT_WAIT_MS: u64 = 25_000;
const MAX_WAIT_MS: u64 = 60_000;

pub struct AppState {
    pub config: ServiceConfig,
    pub store: Arc<EpisodeStore>,
    pub queue: Arc<EscalationQueue>,
    pub backend: BackendFactory,
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, StartupError> {
        config.validate()?;
        let backend = config.backend.build()?;
        let store = EpisodeStore::open(&config.data_dir)?;
        Ok(Arc::new(Self {
            config,
            store,
            queue: Arc::new(EscalationQueue::new()),
            backend,
        }))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/episodes", post(start_episode).get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/events", get(episode_events))
        .route("/escalations/pending", get(pending_escalations))
        .route("/escalations/{id}", get(get_escalation))
        .route("/escalations/{id}/resolve", post(resolve_escalation))
        .route("/metrics", get(metrics))
        .route("/healthz", get(healthz));
    if let Some(dir) = &state.config.console_dir {
        app = app.nest_service("/console", ServeDir::new(dir));
    }
    app.with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    detail: Option<(&'static str, Value)>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            detail: None,
        }
    }

    fn with(mut self, key: &'static str, value: impl Serialize) -> Self {
        self.detail = Some((key, serde_json::to_value(value).unwrap_or(Value::Null)));
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message});
        if let Some((k, v)) = self.detail {
            body[k] = v;
        }
        (self.status, Json(body)).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// JSON body parsed by hand so every malformed body maps to 422.
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartEpisode {
    task_id: String,
    #[serde(default, alias = "delta")]
    threshold: Option<f64>,
    #[serde(default)]
    max_retries: Option<usize>,
    #[serde(default)]
    strategy: Option<StrategyKind>,
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    escalation_timeout_ms: Option<u64>,
    /// Seeds the environment and, for the simulated backend, the model.
    #[serde(default)]
    seed: Option<u64>,
}

fn valid_task_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Loads `{dir}/{id}.json` and its simulated environment.
pub fn load_task(dir: &Path, id: &str) -> Result<(TaskSpec, SimEnvConfig), ApiError> {
    if !valid_task_id(id) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid task id {id:?}")));
    }
    let spec_path: PathBuf = dir.join(format!("{id}.json"));
    if !spec_path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown task {id}")));
    }
    let task = TaskSpec::load(&spec_path).map_err(internal)?;
    let env_path = dir.join(format!("{id}.sim.json"));
    if !env_path.is_file() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("task {id} has no simulated environment ({id}.sim.json)"),
        ));
    }
    let env = SimEnvConfig::load(&env_path).map_err(internal)?;
    Ok((task, env))
}

#[derive(Debug, Serialize)]
struct Started {
    id: String,
    status: EpisodeStatus,
}

async fn start_episode(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Started>), ApiError> {
    let req: StartEpisode = parse_body(&body)?;
    let (task, mut env) = load_task(&state.config.task_dir, &req.task_id)?;
    let defaults = &state.config.planner;
    let detector = DetectorConfig {
        strategy: req.strategy.unwrap_or(defaults.detector.strategy),
        method: req.method.unwrap_or(defaults.detector.method),
        threshold: req.threshold.unwrap_or(defaults.detector.threshold),
        escalation_timeout_ms: req.escalation_timeout_ms.unwrap_or(defaults.detector.escalation_timeout_ms),
    };
    detector
        .validate()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let (env_seed, model_seed) = match req.seed {
        Some(seed) => episode_seeds(seed, 1)[0],
        None => uuid::Uuid::new_v4().as_u64_pair(),
    };
    let app = state.clone();
    let health = tokio::task::spawn_blocking(move || app.backend.health_check())
        .await
        .map_err(internal)?;
    if let Err(e) = health {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("backend unreachable: {e}")));
    }
    let settings = EpisodeSettings {
        strategy: detector.strategy,
        method: detector.method,
        threshold: detector.threshold,
        max_retries: req.max_retries.unwrap_or(defaults.max_retries),
        escalation_timeout_ms: detector.escalation_timeout_ms,
        env_seed,
        model_seed,
    };
    env.rng_seed = env_seed;
    let id = uuid::Uuid::new_v4().to_string();
    state.store.create(&id, &task.id, settings.clone()).map_err(internal)?;
    let runner = state.clone();
    let episode = id.clone();
    tokio::task::spawn_blocking(move || run(&runner, &episode, task, env, detector, settings));
    tracing::info!(episode = %id, "episode started");
    Ok((
        StatusCode::ACCEPTED,
        Json(Started {
            id,
            status: EpisodeStatus::Running,
        }),
    ))
}

/// Submits to the shared queue and records the escalation in the episode
/// stream before blocking.
struct EpisodeChannel {
    queue: Arc<EscalationQueue>,
    store: Arc<EpisodeStore>,
    episode_id: String,
}

impl EscalationChannel for EpisodeChannel {
    fn ask(&self, request: EscalationRequest, timeout: Option<Duration>) -> Result<Resolution, EscalationError> {
        let subtask_index = request.query.subtask.index;
        let uncertainty = request.estimate.value();
        let id = self.queue.submit(request)?;
        if let Err(e) = self.store.push(
            &self.episode_id,
            EventKind::Escalated {
                escalation_id: id.clone(),
                subtask_index,
                uncertainty,
            },
        ) {
            tracing::error!(error = %e, "could not record escalation");
        }
        self.queue.wait(&id, timeout)
    }
}

fn run(state: &AppState, id: &str, task: TaskSpec, env: SimEnvConfig, detector: DetectorConfig, settings: EpisodeSettings) {
    let channel = EpisodeChannel {
        queue: state.queue.clone(),
        store: state.store.clone(),
        episode_id: id.to_string(),
    };
    let backend = state.backend.for_episode(settings.model_seed);
    let finished = match MllmDetector::new(detector, backend, channel) {
        Err(e) => EventKind::Finished {
            status: EpisodeStatus::Failed,
            trace: crate::store::trace_from_steps(&task.id, &[], loopguard_core::domain::FinalStatus::AbortedOperator),
            error: Some(e.to_string()),
        },
        Ok(det) => {
            let mut sim = SimEnv::new(env);
            let store = state.store.clone();
            let mut hook = |step: &StepRecord| {
                if let Err(e) = store.push(id, EventKind::Step { step: step.clone() }) {
                    tracing::error!(error = %e, "could not record step");
                }
            };
            let ctx = EpisodeContext {
                episode_id: Some(id.to_string()),
                on_step: Some(&mut hook),
            };
            match run_episode(&task, &mut sim, &det, settings.max_retries, ctx) {
                Ok(trace) => EventKind::Finished {
                    status: trace.final_status.into(),
                    trace,
                    error: None,
                },
                Err(e) => {
                    tracing::warn!(episode = %id, error = %e, "episode failed");
                    EventKind::Finished {
                        status: EpisodeStatus::Failed,
                        error: Some(e.source.to_string()),
                        trace: e.trace,
                    }
                }
            }
        }
    };
    state.queue.expire_episode(id);
    if let Err(e) = state.store.push(id, finished) {
        tracing::error!(error = %e, "could not record episode end");
    }
    tracing::info!(episode = %id, "episode finished");
}

async fn list_episodes(State(state): State<Arc<AppState>>) -> Json<Vec<EpisodeView>> {
    Json(state.store.views())
}

async fn get_episode(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<EpisodeView>, ApiError> {
    state
        .store
        .view(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown episode {id}")))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    cursor: usize,
    #[serde(default)]
    wait_ms: Option<u64>,
}

#[derive(Debug, Serialize)]
struct EventsPage {
    events: Vec<EpisodeEvent>,
    next_cursor: usize,
    finished: bool,
}

/// Long-poll: returns as soon as events past `cursor` exist, the episode
/// has finished, or `wait_ms` elapses.
async fn episode_events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Json<EventsPage>, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown episode {id}"));
    let mut rx = state.store.subscribe(&id).ok_or_else(not_found)?;
    let wait = Duration::from_millis(q.wait_ms.unwrap_or(DEFAULT_WAIT_MS).min(MAX_WAIT_MS));
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let (events, finished) = state.store.events_since(&id, q.cursor).ok_or_else(not_found)?;
        if !events.is_empty() || finished || tokio::time::Instant::now() >= deadline {
            let next_cursor = events.last().map(|e| e.seq + 1).unwrap_or(q.cursor);
            return Ok(Json(EventsPage {
                events,
                next_cursor,
                finished,
            }));
        }
        if tokio::time::timeout_at(deadline, rx.changed()).await.is_err() {
            continue;
        }
    }
}

#[derive(Debug, Deserialize)]
struct PendingQuery {
    #[serde(default)]
    wait_ms: Option<u64>,
}

async fn pending_escalations(
    State(state): State<Arc<AppState>>,
    Query(q): Query<PendingQuery>,
) -> Result<Json<Vec<EscalationRequest>>, ApiError> {
    let wait = q.wait_ms.unwrap_or(0).min(MAX_WAIT_MS);
    if wait == 0 {
        return Ok(Json(state.queue.pending()));
    }
    let queue = state.queue.clone();
    tokio::task::spawn_blocking(move || queue.wait_for_pending(Duration::from_millis(wait)))
        .await
        .map(Json)
        .map_err(internal)
}

async fn get_escalation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<EscalationRequest>, ApiError> {
    state
        .queue
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown escalation {id}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResolveBody {
    outcome: Outcome,
    #[serde(default)]
    note: Option<String>,
}

async fn resolve_escalation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<EscalationRequest>, ApiError> {
    let body: ResolveBody = parse_body(&body)?;
    match state.queue.resolve(&id, body.outcome, body.note) {
        Ok(req) => {
            tracing::info!(escalation = %id, outcome = %body.outcome, "escalation resolved");
            Ok(Json(req))
        }
        Err(EscalationError::NotFound(_)) => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown escalation {id}"))),
        Err(EscalationError::AlreadyResolved(req)) => {
            Err(ApiError::new(StatusCode::CONFLICT, "already resolved").with("escalation", *req))
        }
        Err(EscalationError::Expired(req)) => {
            Err(ApiError::new(StatusCode::CONFLICT, "escalation expired").with("escalation", *req))
        }
        Err(e) => Err(internal(e)),
    }
}

#[derive(Debug, Serialize)]
struct MetricsView {
    running: usize,
    #[serde(flatten)]
    metrics: Option<EpisodeMetrics>,
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<MetricsView> {
    let traces = state.store.finished_traces();
    Json(MetricsView {
        running: state.store.running(),
        metrics: episode_metrics(&traces).ok(),
    })
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let app = state.clone();
    let backend = tokio::task::spawn_blocking(move || app.backend.health_check())
        .await
        .unwrap_or_else(|e| Err(e.to_string()));
    Json(json!({
        "status": "ok",
        "backend": match backend {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("unreachable: {e}"),
        },
    }))
}

/// Binds and serves until interrupted.
pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let addr = state.config.listen_addr()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    // episodes waiting on an operator end as aborted_operator
    state.queue.expire_all();
    Ok(())
}
