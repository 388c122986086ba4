//! HTTP routes. Handlers check the token, hand the work to the engine on a
//! blocking thread and map engine errors onto status codes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flexext_core::engine::{BatchReport, CycleReport, EngineError, Submission};
use flexext_core::ingestion::{IngestError, JsonSubmission};
use flexext_core::model::RequestId;
use flexext_core::notifier::JobId;
use flexext_core::roster::export_roster_csv;
use flexext_core::views::{audit_entry, outbox, OutboxItem, PendingReviewItem, RequestSummary};
use flexext_core::{Engine, ViewerRole};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Notify;

use crate::auth::{Auth, Caller, Need};

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub auth: Auth,
    /// Wakes the background worker after new work was queued.
    pub nudge: Arc<Notify>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, auth: Auth) -> Self {
        Self {
            engine,
            auth,
            nudge: Arc::new(Notify::new()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/requests", post(submit))
        .route("/pending", get(pending))
        .route("/pending/{id}/decision", post(decide))
        .route("/roster", get(roster_json))
        .route("/roster.json", get(roster_json))
        .route("/roster.csv", get(roster_csv))
        .route("/outbox", get(list_outbox))
        .route("/outbox/{id}/requeue", post(requeue))
        .route("/audit", get(audit))
        .route("/ingest/csv", post(ingest_csv))
        .route("/dispatch", post(dispatch))
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldProblem {
    pub field: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<FieldProblem>,
    ids: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fields: Vec::new(),
            ids: Vec::new(),
        }
    }

    fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "Forbidden", "missing or insufficient bearer token")
    }

    fn field(mut self, field: &str, code: &str) -> Self {
        self.fields.push(FieldProblem {
            field: field.to_string(),
            code: code.to_string(),
            message: self.message.clone(),
        });
        self
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Normalize(n) => {
                Self::new(StatusCode::BAD_REQUEST, n.code(), message).field(n.field(), n.code())
            }
            EngineError::Ingest(IngestError::MissingField(f)) => {
                Self::new(StatusCode::BAD_REQUEST, "MissingField", message).field(&f, "MissingField")
            }
            EngineError::Ingest(IngestError::BadTimestamp(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "BadTimestamp", message).field("submitted_at", "BadTimestamp")
            }
            EngineError::Ingest(_) => Self::new(StatusCode::BAD_REQUEST, "BadInput", message),
            EngineError::Duplicate { ids } => {
                let mut err = Self::new(StatusCode::CONFLICT, "Duplicate", message);
                err.ids = ids.into_iter().map(|i| i.0).collect();
                err
            }
            EngineError::NotFound(_) | EngineError::UnknownJob(_) => {
                Self::new(StatusCode::NOT_FOUND, "NotFound", message)
            }
            EngineError::AlreadyDecided { .. } => Self::new(StatusCode::CONFLICT, "AlreadyDecided", message),
            EngineError::NotRequeueable { .. } => Self::new(StatusCode::CONFLICT, "NotRequeueable", message),
            EngineError::Notify(_) | EngineError::Store(_) => {
                tracing::error!(error = %message, "request failed");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        if !self.ids.is_empty() {
            body["ids"] = json!(self.ids);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
pub struct ViewQuery {
    #[serde(default)]
    view: Option<String>,
    #[serde(default)]
    since: Option<String>,
}

impl ViewQuery {
    fn restricted(&self) -> ApiResult<bool> {
        match self.view.as_deref() {
            None | Some("full") => Ok(false),
            Some("restricted") => Ok(true),
            Some(other) => Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "BadView",
                format!("view must be \"full\" or \"restricted\", got {other:?}"),
            )),
        }
    }
}

fn staff(state: &AppState, headers: &HeaderMap, query: &ViewQuery, need: Need) -> ApiResult<(String, ViewerRole)> {
    let restricted = query.view.as_deref() == Some("restricted");
    let Some(Caller::Staff { id, view, .. }) = state.auth.check(headers, restricted, need) else {
        return Err(ApiError::forbidden());
    };
    query.restricted()?;
    Ok((id, view))
}

async fn blocking<T: Send + 'static>(work: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "last_seq": state.engine.store().last_seq() }))
}

async fn submit(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<JsonSubmission>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Submission>)> {
    if state.auth.check(&headers, false, Need::Submit).is_none() {
        return Err(ApiError::forbidden());
    }
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadJson", e.body_text()))?;
    let engine = state.engine.clone();
    let submission = blocking(move || engine.submit_json(body)).await??;
    state.nudge.notify_one();
    Ok((StatusCode::CREATED, Json(submission)))
}

async fn pending(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Json<Vec<PendingReviewItem>>> {
    let (_, view) = staff(&state, &headers, &query, Need::StaffRead)?;
    Ok(Json(state.engine.pending(view)))
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Verdict {
    Approve,
    Deny,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    decision: Verdict,
    #[serde(default)]
    note: String,
}

async fn decide(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(query): Query<ViewQuery>,
    body: Result<Json<DecisionBody>, JsonRejection>,
) -> ApiResult<Json<RequestSummary>> {
    let (staff_id, view) = staff(&state, &headers, &query, Need::StaffWrite)?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadJson", e.body_text()))?;
    let engine = state.engine.clone();
    let id = RequestId(id);
    let approve = matches!(body.decision, Verdict::Approve);
    let record = blocking(move || engine.decide(&id, approve, &body.note, &staff_id)).await??;
    state.nudge.notify_one();
    let snapshot = state.engine.snapshot();
    let current = snapshot.request(&record.request.id).unwrap_or(&record);
    Ok(Json(RequestSummary::new(&snapshot, current, view)))
}

async fn roster_json(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Response> {
    let (_, view) = staff(&state, &headers, &query, Need::StaffRead)?;
    Ok(Json(state.engine.roster(view)).into_response())
}

async fn roster_csv(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Response> {
    let (_, view) = staff(&state, &headers, &query, Need::StaffRead)?;
    let bytes = export_roster_csv(&state.engine.roster(view), &state.engine.settings().catalog);
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], bytes).into_response())
}

async fn list_outbox(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Json<Vec<OutboxItem>>> {
    let (_, view) = staff(&state, &headers, &query, Need::StaffRead)?;
    Ok(Json(outbox(&state.engine.snapshot(), view)))
}

async fn requeue(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Json<OutboxItem>> {
    let (staff_id, view) = staff(&state, &headers, &query, Need::StaffWrite)?;
    let engine = state.engine.clone();
    let job = blocking(move || engine.requeue_email(&JobId(id), &staff_id)).await??;
    state.nudge.notify_one();
    Ok(Json(OutboxItem::new(&job, view)))
}

async fn audit(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Json<Value>> {
    let (_, view) = staff(&state, &headers, &query, Need::StaffRead)?;
    let store = state.engine.store();
    let last_seq = store.last_seq();
    let since = match query.since.as_deref() {
        None => 0,
        Some(text) => text.trim().parse::<u64>().map_err(|_| bad_since(text, last_seq))?,
    };
    if since > last_seq {
        return Err(bad_since(&since.to_string(), last_seq));
    }
    let events: Vec<Value> = store.events_since(since).iter().map(|e| audit_entry(e, view)).collect();
    Ok(Json(json!({ "since": since, "last_seq": last_seq, "events": events })))
}

fn bad_since(text: &str, last_seq: u64) -> ApiError {
    ApiError::new(
        StatusCode::RANGE_NOT_SATISFIABLE,
        "BadSince",
        format!("since must be a sequence number between 0 and {last_seq}, got {text:?}"),
    )
}

async fn ingest_csv(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
    body: Bytes,
) -> ApiResult<Json<BatchReport>> {
    staff(&state, &headers, &query, Need::StaffWrite)?;
    let engine = state.engine.clone();
    let report = blocking(move || engine.ingest_csv(&body)).await??;
    if report.accepted > 0 {
        state.nudge.notify_one();
    }
    Ok(Json(report))
}

async fn dispatch(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ViewQuery>,
) -> ApiResult<Json<CycleReport>> {
    staff(&state, &headers, &query, Need::StaffWrite)?;
    let engine = state.engine.clone();
    Ok(Json(blocking(move || engine.dispatch()).await??))
}
