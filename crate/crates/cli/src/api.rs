//! HTTP JSON API over in-memory sessions.
//!
//! Each session sits behind its own mutex, so mutations of one session are
//! serialized while different sessions proceed concurrently.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use lago_core::optimizer::OptimizationCriteria;
use lago_core::outcome_model::OutcomeFit;
use lago_core::stage_engine::Recommendation;
use lago_core::trial_model::{StageDataset, TrialConfig};
use lago_core::CostModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};
use tower_http::cors::{Any, CorsLayer};

use crate::canonical::to_canonical_string;
use crate::commands::{
    self, FinalRequest, GoalRequest, PowerRequest, ProjectRequest, StageRequest, TestRequest,
};
use crate::error::{AppError, AppResult, ErrorClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub config: TrialConfig,
    pub cost: CostModel,
    #[serde(default)]
    pub datasets: Vec<StageDataset>,
    #[serde(default)]
    pub fit: Option<OutcomeFit>,
    /// Goal settings of the latest optimization, reused by the report.
    #[serde(default)]
    pub goal: Option<GoalRequest>,
    #[serde(default)]
    pub criteria: Option<OptimizationCriteria>,
    #[serde(default)]
    pub recommendation: Option<Recommendation>,
    pub created_at: u64,
    pub updated_at: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Session {
    fn new(config: TrialConfig) -> Self {
        let t = now();
        Self {
            session_id: uuid::Uuid::new_v4().to_string(),
            cost: CostModel::from_config(&config),
            config,
            datasets: Vec::new(),
            fit: None,
            goal: None,
            criteria: None,
            recommendation: None,
            created_at: t,
            updated_at: t,
        }
    }

    fn touch(&mut self) {
        self.updated_at = now();
    }

    fn require_fit(&self) -> AppResult<&OutcomeFit> {
        self.fit
            .as_ref()
            .ok_or_else(|| AppError::conflict("no fitted model; POST /fit first"))
    }
}

#[derive(Debug, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub stages_loaded: Vec<usize>,
    pub rows: usize,
    pub fitted: bool,
    pub created_at: u64,
    pub updated_at: u64,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        Self {
            session_id: s.session_id.clone(),
            stages_loaded: s.datasets.iter().map(|d| d.stage_index).collect(),
            rows: s.datasets.iter().map(|d| d.records.len()).sum(),
            fitted: s.fit.is_some(),
            created_at: s.created_at,
            updated_at: s.updated_at,
        }
    }
}

type SessionMap = HashMap<String, Arc<Mutex<Session>>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<SessionMap>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a session built from `config` and returns its id.
    pub async fn create_session(&self, config: TrialConfig) -> String {
        let session = Session::new(config);
        let id = session.session_id.clone();
        self.sessions
            .write()
            .await
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        id
    }

    async fn get(&self, id: &str) -> AppResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::not_found(format!("unknown session `{id}`")))
    }
}

/// Canonical JSON body with the given status.
pub struct Json(pub StatusCode, pub String);

impl IntoResponse for Json {
    fn into_response(self) -> Response {
        (
            self.0,
            [(
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/json"),
            )],
            self.1,
        )
            .into_response()
    }
}

fn ok<T: Serialize>(status: StatusCode, value: &T) -> Result<Json, AppError> {
    Ok(Json(status, to_canonical_string(value)?))
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match self.class {
            ErrorClass::Usage | ErrorClass::Validation | ErrorClass::Data => {
                StatusCode::BAD_REQUEST
            }
            ErrorClass::NotFound => StatusCode::NOT_FOUND,
            ErrorClass::Conflict => StatusCode::CONFLICT,
            ErrorClass::Computation => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = match &self.report {
            Some(report) => serde_json::to_string(report).unwrap_or_else(|_| self.json_line()),
            None => self.json_line(),
        };
        Json(status, body).into_response()
    }
}

type Reply = Result<Json, AppError>;

fn parse_body<T: DeserializeOwned>(body: &str) -> AppResult<T> {
    let text = if body.trim().is_empty() { "{}" } else { body };
    Ok(serde_json::from_str(text)?)
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    config: TrialConfig,
}

async fn create_session(State(state): State<AppState>, body: String) -> Reply {
    let config = commands::parse_config(&body)?;
    let id = state.create_session(config.clone()).await;
    ok(
        StatusCode::CREATED,
        &Created {
            session_id: id,
            config,
        },
    )
}

async fn import_session(State(state): State<AppState>, body: String) -> Reply {
    let mut session: Session = parse_body(&body)?;
    session.config.ensure_valid()?;
    session.session_id = uuid::Uuid::new_v4().to_string();
    session.touch();
    let summary = SessionSummary::from(&session);
    state
        .sessions
        .write()
        .await
        .insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
    ok(StatusCode::CREATED, &summary)
}

async fn session_summary(State(state): State<AppState>, Path(id): Path<String>) -> Reply {
    let session = state.get(&id).await?;
    let s = session.lock().await;
    ok(StatusCode::OK, &SessionSummary::from(&*s))
}

async fn export_session(State(state): State<AppState>, Path(id): Path<String>) -> Reply {
    let session = state.get(&id).await?;
    let s = session.lock().await;
    Ok(Json(StatusCode::OK, serde_json::to_string(&*s)?))
}

async fn upload_data(State(state): State<AppState>, Path(id): Path<String>, body: String) -> Reply {
    let session = state.get(&id).await?;
    let mut s = session.lock().await;
    let incoming = commands::parse_data(&body, &s.config)?;
    for d in &incoming {
        if s.datasets.iter().any(|e| e.stage_index == d.stage_index) {
            return Err(AppError::conflict(format!(
                "stage {} is already loaded",
                d.stage_index
            )));
        }
    }
    s.datasets.extend(incoming);
    s.datasets.sort_by_key(|d| d.stage_index);
    s.fit = None;
    s.touch();
    ok(StatusCode::OK, &SessionSummary::from(&*s))
}

async fn fit(State(state): State<AppState>, Path(id): Path<String>) -> Reply {
    let session = state.get(&id).await?;
    let mut s = session.lock().await;
    let fit = commands::fit(&s.config, &s.datasets)?;
    let reply = ok(StatusCode::OK, &fit);
    s.fit = Some(fit);
    s.touch();
    reply
}

async fn optimize(State(state): State<AppState>, Path(id): Path<String>, body: String) -> Reply {
    let req: GoalRequest = parse_body(&body)?;
    let session = state.get(&id).await?;
    let mut s = session.lock().await;
    let data = commands::combined(&s.config, &s.datasets).ok();
    let result = commands::optimize(&s.config, s.require_fit()?, &req, data.as_ref())?;
    s.criteria = Some(commands::criteria_from(&s.config, &req, data.as_ref())?);
    s.goal = Some(req);
    s.touch();
    ok(StatusCode::OK, &result)
}

async fn confidence_set(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> Reply {
    let req: GoalRequest = parse_body(&body)?;
    let session = state.get(&id).await?;
    let s = session.lock().await;
    let data = commands::combined(&s.config, &s.datasets).ok();
    ok(
        StatusCode::OK,
        &commands::confset(&s.config, s.require_fit()?, &req, data.as_ref())?,
    )
}

async fn overall_test(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: String,
) -> Reply {
    let req: TestRequest = parse_body(&body)?;
    let session = state.get(&id).await?;
    let s = session.lock().await;
    ok(
        StatusCode::OK,
        &commands::test(&s.config, &s.datasets, &req)?,
    )
}

async fn recommend(State(state): State<AppState>, Path(id): Path<String>, body: String) -> Reply {
    let req: StageRequest = parse_body(&body)?;
    let session = state.get(&id).await?;
    let mut s = session.lock().await;
    let rec = commands::run_stage(&s.config, &s.datasets, &req)?;
    s.recommendation = Some(rec.clone());
    s.touch();
    ok(StatusCode::OK, &rec)
}

#[derive(Deserialize)]
struct CurveQuery {
    component: String,
}

async fn cost_curve(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<CurveQuery>,
) -> Reply {
    let session = state.get(&id).await?;
    let s = session.lock().await;
    ok(
        StatusCode::OK,
        &commands::cost_curve_for(&s.config, &q.component)?,
    )
}

/// Final report with the goal of the latest optimization. Query parameters
/// are not needed; subgroups and comparison come from an optional body on POST.
async fn report_get(State(state): State<AppState>, Path(id): Path<String>) -> Reply {
    report_with(state, id, None).await
}

async fn report_post(State(state): State<AppState>, Path(id): Path<String>, body: String) -> Reply {
    let req: FinalRequest = parse_body(&body)?;
    report_with(state, id, Some(req)).await
}

async fn report_with(state: AppState, id: String, req: Option<FinalRequest>) -> Reply {
    let session = state.get(&id).await?;
    let s = session.lock().await;
    s.require_fit()?;
    let req = match req {
        Some(r) => r,
        None => FinalRequest {
            goal: s
                .goal
                .clone()
                .ok_or_else(|| AppError::conflict("no goal set; POST /optimize first"))?,
            ..FinalRequest::default()
        },
    };
    ok(
        StatusCode::OK,
        &commands::final_report(&s.config, &s.datasets, &req)?,
    )
}

async fn project(body: String) -> Reply {
    let req: ProjectRequest = parse_body(&body)?;
    ok(StatusCode::OK, &commands::project(&req)?)
}

async fn power(body: String) -> Reply {
    let req: PowerRequest = parse_body(&body)?;
    ok(StatusCode::OK, &commands::power(&req)?)
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/import", post(import_session))
        .route("/api/sessions/{id}", get(session_summary))
        .route("/api/sessions/{id}/snapshot", get(export_session))
        .route("/api/sessions/{id}/data", post(upload_data))
        .route("/api/sessions/{id}/fit", post(fit))
        .route("/api/sessions/{id}/optimize", post(optimize))
        .route("/api/sessions/{id}/confidence-set", post(confidence_set))
        .route("/api/sessions/{id}/test", post(overall_test))
        .route("/api/sessions/{id}/recommend", post(recommend))
        .route("/api/sessions/{id}/cost-curve", get(cost_curve))
        .route(
            "/api/sessions/{id}/report",
            get(report_get).post(report_post),
        )
        .route("/api/project", post(project))
        .route("/api/power", post(power))
        .layer(cors)
        .with_state(state)
}

/// Serves the API on `127.0.0.1:port` until the process ends.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
