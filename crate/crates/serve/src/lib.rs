//! Session-oriented HTTP service: fit a train context once, then explain
//! instances and what-if variants against it.
//!
//! | method | path                    | body                                        |
//! |--------|-------------------------|---------------------------------------------|
//! | POST   | `/sessions`             | `{csv \| path, target_column?, split?, seed?}` |
//! | POST   | `/sessions/{id}/explain`| `{instance: {feature: value}}`              |
//! | POST   | `/sessions/{id}/whatif` | `{instance, overrides: {feature: value}}`   |
//! | GET    | `/health`               |                                             |
//!
//! Errors are `{"error": code, "detail": message}` with a 4xx/5xx status.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use shappfn_core::eval::{CsvTable, EvalError};
use shappfn_core::model::{Explanation, FittedContext};
use shappfn_core::Checkpoint;

pub const DEFAULT_PORT: u16 = 8787;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Sessions untouched for this long are dropped.
    pub idle_ttl: Duration,
    /// Directory that `path` requests are resolved against; `None` refuses them.
    pub data_root: Option<PathBuf>,
    pub max_features: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            idle_ttl: Duration::from_secs(30 * 60),
            data_root: None,
            max_features: 64,
        }
    }
}

/// A fitted train context. Only the idle clock changes after creation.
pub struct Session {
    context: FittedContext<f32>,
    feature_names: Vec<String>,
    created: Instant,
    last_used_ms: AtomicU64,
}

impl Session {
    fn touch(&self) {
        let ms = self.created.elapsed().as_millis() as u64;
        self.last_used_ms.store(ms, Ordering::Relaxed);
    }

    fn idle(&self) -> Duration {
        let last = Duration::from_millis(self.last_used_ms.load(Ordering::Relaxed));
        self.created.elapsed().saturating_sub(last)
    }
}

pub struct AppState {
    checkpoint: Checkpoint,
    fingerprint: String,
    config: ServeConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(checkpoint: Checkpoint, config: ServeConfig) -> Arc<Self> {
        Arc::new(Self {
            fingerprint: checkpoint.fingerprint(),
            checkpoint,
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session lock").len()
    }

    fn expire(&self) {
        let ttl = self.config.idle_ttl;
        self.sessions.write().expect("session lock").retain(|_, s| s.idle() < ttl);
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.expire();
        let s = self
            .sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))?;
        s.touch();
        Ok(s)
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub error: &'static str,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn invalid(error: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, error, detail)
    }

    fn internal(detail: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::MissingColumn(_) => "missing_column",
            EvalError::Parse { .. } | EvalError::Label { .. } | EvalError::Csv(_) => "parse_error",
            EvalError::Io { .. } => "dataset_unreadable",
            _ => "invalid_dataset",
        };
        Self::invalid(code, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    /// Inline CSV text with a header row.
    pub csv: Option<String>,
    /// File under the server's data root.
    pub path: Option<String>,
    pub target_column: Option<String>,
    pub split: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub n: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(rename = "F")]
    pub f: usize,
    pub feature_names: Vec<String>,
    /// Raw label values, ordered as the model's class indices.
    pub classes: Vec<i64>,
    /// Train-split row count per class.
    pub class_balance: Vec<usize>,
}

#[derive(Debug, Deserialize)]
pub struct ExplainRequest {
    pub instance: Map<String, Value>,
}

#[derive(Debug, Deserialize)]
pub struct WhatIfRequest {
    pub instance: Map<String, Value>,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

/// Explanation of one instance. `phi` maps feature name to per-class values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationPayload {
    pub base: Vec<f64>,
    pub phi: Map<String, Value>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub additivity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfPayload {
    pub original: ExplanationPayload,
    pub modified: ExplanationPayload,
    /// Modified minus original phi, per feature and class.
    pub deltas: Map<String, Value>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn payload(names: &[String], e: &Explanation<f32>) -> ExplanationPayload {
    let phi = names
        .iter()
        .zip(&e.phi)
        .map(|(n, row)| (n.clone(), Value::from(widen(row))))
        .collect();
    ExplanationPayload {
        base: widen(&e.base),
        phi,
        logits: widen(&e.logits),
        probabilities: widen(&e.probabilities()),
        additivity_residual: e.additivity_residual() as f64,
    }
}

fn number(name: &str, v: &Value) -> Result<f64, ApiError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ApiError::invalid("invalid_value", format!("feature `{name}` must be a finite number")))
}

/// Feature vector in session order. Every feature must be present; unknown
/// names are rejected.
fn instance_row(names: &[String], instance: &Map<String, Value>) -> Result<Vec<f64>, ApiError> {
    if let Some(k) = instance.keys().find(|k| !names.contains(k)) {
        return Err(ApiError::invalid("unknown_feature", format!("unknown feature `{k}`")));
    }
    names
        .iter()
        .map(|n| {
            let v = instance
                .get(n)
                .ok_or_else(|| ApiError::invalid("missing_feature", format!("missing feature `{n}`")))?;
            number(n, v)
        })
        .collect()
}

async fn explain_rows(state: Arc<AppState>, session: Arc<Session>, rows: Vec<Vec<f64>>) -> Result<Vec<Explanation<f32>>, ApiError> {
    tokio::task::spawn_blocking(move || session.context.explain(&state.checkpoint.params, &rows))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)
}

fn resolve(root: &Path, rel: &str) -> Result<PathBuf, ApiError> {
    let forbidden = || ApiError::new(StatusCode::FORBIDDEN, "path_forbidden", format!("`{rel}` is outside the data root"));
    let root = root.canonicalize().map_err(ApiError::internal)?;
    let full = root.join(rel).canonicalize().map_err(|e| {
        ApiError::invalid("dataset_unreadable", format!("{rel}: {e}"))
    })?;
    if full.starts_with(&root) {
        Ok(full)
    } else {
        Err(forbidden())
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionSummary>, ApiError> {
    let Json(req) = body?;
    let text = match (&req.csv, &req.path) {
        (Some(csv), None) => csv.clone(),
        (None, Some(p)) => {
            let root = state.config.data_root.as_deref().ok_or_else(|| {
                ApiError::new(StatusCode::FORBIDDEN, "path_forbidden", "server has no data root")
            })?;
            let full = resolve(root, p)?;
            std::fs::read_to_string(&full)
                .map_err(|e| ApiError::invalid("dataset_unreadable", format!("{p}: {e}")))?
        }
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "give exactly one of `csv` and `path`")),
    };
    let table = CsvTable::parse(&text, req.target_column.as_deref())?;
    let f = table.feature_names.len();
    if f > state.config.max_features {
        return Err(ApiError::invalid(
            "too_many_features",
            format!("{f} features exceed the limit of {}", state.config.max_features),
        ));
    }
    let classes = table.classes();
    let model_classes = state.checkpoint.model.classes;
    if classes.len() > model_classes {
        return Err(ApiError::invalid(
            "too_many_classes",
            format!("{} classes; the model handles {model_classes}", classes.len()),
        ));
    }
    let ep = table.split(req.split.unwrap_or(0.8), req.seed.unwrap_or(0))?;
    let st = state.clone();
    let (train_x, train_y) = (ep.train_x.clone(), ep.train_y.clone());
    let context = tokio::task::spawn_blocking(move || {
        FittedContext::fit(&train_x, &train_y, &st.checkpoint.params, &st.checkpoint.model)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::invalid("invalid_dataset", e.to_string()))?;
    let mut balance = vec![0; classes.len()];
    for &y in &ep.train_y {
        balance[y] += 1;
    }
    let id = format!("{:032x}", rand::random::<u128>());
    let summary = SessionSummary {
        id: id.clone(),
        n: ep.n_train() + ep.n_test(),
        n_train: ep.n_train(),
        n_test: ep.n_test(),
        f,
        feature_names: table.feature_names.clone(),
        classes,
        class_balance: balance,
    };
    let session = Session {
        context,
        feature_names: table.feature_names,
        created: Instant::now(),
        last_used_ms: AtomicU64::new(0),
    };
    state.expire();
    state.sessions.write().expect("session lock").insert(id, Arc::new(session));
    Ok(Json(summary))
}

async fn explain(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ExplainRequest>, JsonRejection>,
) -> Result<Json<ExplanationPayload>, ApiError> {
    let Json(req) = body?;
    let session = state.session(&id)?;
    let row = instance_row(&session.feature_names, &req.instance)?;
    let e = explain_rows(state, session.clone(), vec![row]).await?;
    Ok(Json(payload(&session.feature_names, &e[0])))
}

async fn whatif(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<WhatIfRequest>, JsonRejection>,
) -> Result<Json<WhatIfPayload>, ApiError> {
    let Json(req) = body?;
    let session = state.session(&id)?;
    let names = &session.feature_names;
    let row = instance_row(names, &req.instance)?;
    let mut modified = row.clone();
    for (k, v) in &req.overrides {
        let j = names
            .iter()
            .position(|n| n == k)
            .ok_or_else(|| ApiError::invalid("unknown_feature", format!("unknown feature `{k}`")))?;
        modified[j] = number(k, v)?;
    }
    let e = explain_rows(state, session.clone(), vec![row, modified]).await?;
    let deltas = names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let d: Vec<f64> = e[1].phi[j]
                .iter()
                .zip(&e[0].phi[j])
                .map(|(&m, &o)| m as f64 - o as f64)
                .collect();
            (n.clone(), Value::from(d))
        })
        .collect();
    Ok(Json(WhatIfPayload {
        original: payload(names, &e[0]),
        modified: payload(names, &e[1]),
        deltas,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
    pub step: usize,
    pub param_count: usize,
    pub model: shappfn_core::ModelConfig,
    pub sessions: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    state.expire();
    let c = &state.checkpoint;
    Json(Health {
        status: "ok".into(),
        checkpoint: state.fingerprint.clone(),
        step: c.step,
        param_count: c.param_count(),
        model: c.model.clone(),
        sessions: state.session_count(),
    })
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/explain", post(explain))
        .route("/sessions/{id}/whatif", post(whatif))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn run(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
