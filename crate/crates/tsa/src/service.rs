//! HTTP API over the assessments directory.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | /assessments | plan and start a run (202) |
//! | GET | /assessments | list |
//! | GET | /assessments/{id} | status, sections, staleness |
//! | GET/PATCH | /assessments/{id}/sections/{section} | read / human edit |
//! | POST | /assessments/{id}/sections/{section}/append | append text |
//! | POST | /assessments/{id}/sections/{section}/reinvoke | regenerate with an instruction |
//! | POST | /assessments/{id}/uploads | add a document as evidence |
//! | GET | /assessments/{id}/evidence/{evidence_id} | one record |
//! | GET | /assessments/{id}/events | progress as server-sent events |
//! | POST | /assessments/{id}/resume | continue an interrupted run (202) |
//! | GET | /assessments/{id}/evaluation | scores |
//! | GET | /assessments/{id}/export?format=md\|html\|json | report |
//! | GET | /assessments/{id}/preferences | proposed preference deltas |
//! | GET/POST | /preferences | accepted preferences / accept one |
//!
//! Errors are `{"code", "cause", "message"}` with the error code verbatim.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::{json, Value};
use tsa_core::domain::{SectionId, ALL_SECTIONS};
use tsa_core::refinement::{capture_preferences, staleness, PreferenceDelta, RefinementAction, UploadDocument, DEFAULT_REPETITIONS};
use tsa_core::report::ExportFormat;
use tsa_core::state::{RunStatus, StateStore};
use tsa_core::{Error, ErrorCode, Result};

use crate::config::Settings;
use crate::runner::{
    assessment_path, evaluate_all, evidence_record, export_dir, load_preferences, save_preferences, NewAssessment,
    Session,
};
use crate::store::{AssessmentDir, CONFIG};

/// HTTP status for an error code.
pub fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::SequentialViolation => StatusCode::CONFLICT,
        ErrorCode::StorageError | ErrorCode::StateCorrupt => StatusCode::INTERNAL_SERVER_ERROR,
        ErrorCode::ToolUnavailable | ErrorCode::BackendUnavailable => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let body = json!({"code": e.code, "cause": e.cause, "message": e.message});
        (status_of(e.code), Json(body)).into_response()
    }
}

type ApiResult<T> = core::result::Result<T, ApiError>;

pub struct AppState {
    pub settings: Settings,
    pub token: Option<String>,
    /// Assessments with a run or refinement in progress in this process.
    busy: Mutex<BTreeSet<String>>,
}

/// Releases a busy mark when dropped.
struct BusyGuard {
    state: Arc<AppState>,
    id: String,
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.state.busy.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.id);
    }
}

impl AppState {
    pub fn new(settings: Settings, token: Option<String>) -> Arc<AppState> {
        Arc::new(AppState { settings, token, busy: Mutex::new(BTreeSet::new()) })
    }

    fn is_busy(&self, id: &str) -> bool {
        self.busy.lock().unwrap_or_else(|p| p.into_inner()).contains(id)
    }

    fn claim(self: &Arc<Self>, id: &str) -> Result<BusyGuard> {
        let mut busy = self.busy.lock().unwrap_or_else(|p| p.into_inner());
        if !busy.insert(id.to_owned()) {
            return Err(Error::new(ErrorCode::SequentialViolation, format!("assessment {id} is busy")));
        }
        Ok(BusyGuard { state: self.clone(), id: id.to_owned() })
    }

    fn path(&self, id: &str) -> Result<PathBuf> {
        let p = assessment_path(&self.settings.assessments, id)?;
        if !p.join(CONFIG).exists() {
            return Err(Error::not_found(format!("no assessment '{id}'")));
        }
        Ok(p)
    }
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::storage(format!("worker failed: {e}")))),
    }
}

fn section_param(raw: &str) -> Result<SectionId> {
    raw.parse().map_err(|_| Error::not_found(format!("no section '{raw}'")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBody {
    pub target: String,
    #[serde(default)]
    pub therapeutic_area: Option<String>,
    #[serde(default)]
    pub modality: Option<String>,
    #[serde(default)]
    pub species: Option<Vec<String>>,
    #[serde(default)]
    pub notes: Option<String>,
    #[serde(default)]
    pub directives: BTreeMap<String, String>,
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub actor: Option<String>,
}

async fn create(State(app): State<Shared>, Json(body): Json<CreateBody>) -> ApiResult<Response> {
    let req = NewAssessment {
        target: body.target,
        therapeutic_area: body.therapeutic_area,
        modality: body.modality,
        species: body.species,
        notes: body.notes,
        directives: body.directives.into_iter().collect(),
        id: body.id,
        actor: body.actor,
    };
    let settings = app.settings.clone();
    let session = blocking(move || Session::create(&settings, &req)).await?;
    let id = session.id().to_owned();
    let guard = app.claim(&id)?;
    start(session, guard, false);
    Ok((StatusCode::ACCEPTED, Json(json!({"assessment_id": id, "status": "running"}))).into_response())
}

/// Runs (or resumes) in the background; the outcome lands in the state files.
fn start(mut session: Session, guard: BusyGuard, resume: bool) {
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let r = if resume { session.resume() } else { session.run() };
        if let Err(e) = r {
            eprintln!("assessment {}: {e}", session.id());
        }
    });
}

async fn resume(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = app.path(&id)?;
    let guard = app.claim(&id)?;
    let session = blocking(move || Session::open(&path, None)).await?;
    let status = session.status()?;
    if status == Some(RunStatus::Completed) {
        return Ok(Json(json!({"assessment_id": id, "status": "completed"})).into_response());
    }
    start(session, guard, true);
    Ok((StatusCode::ACCEPTED, Json(json!({"assessment_id": id, "status": "running"}))).into_response())
}

fn summary(path: &FsPath, busy: bool) -> Result<Value> {
    let dir = AssessmentDir::open(path)?;
    let plan = dir.read_plan()?;
    let state = dir.load_state()?;
    let report = dir.current_report()?;
    let stale = report.as_ref().map(|r| staleness(r, &plan.graph)).unwrap_or_default();
    let sections: Vec<Value> = report
        .iter()
        .flat_map(|r| r.sections.iter())
        .map(|s| {
            json!({
                "section_id": s.section_id,
                "title": s.section_id.title(),
                "status": s.status,
                "revision": s.revision,
                "produced_by": s.produced_by,
                "stale": stale.get(&s.section_id).copied().unwrap_or(false),
            })
        })
        .collect();
    Ok(json!({
        "assessment_id": plan.assessment_id,
        "target": plan.target,
        "status": state.as_ref().map(|s| json!(s.status)).unwrap_or(json!("planned")),
        "busy": busy,
        "current": state.as_ref().and_then(|s| s.current),
        "completed": state.as_ref().map(|s| s.completed.clone()).unwrap_or_default(),
        "failure": state.as_ref().and_then(|s| s.failure.clone()),
        "sections": sections,
    }))
}

async fn show(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let path = app.path(&id)?;
    let busy = app.is_busy(&id);
    Ok(Json(blocking(move || summary(&path, busy)).await?))
}

async fn list(State(app): State<Shared>) -> ApiResult<Json<Value>> {
    let root = app.settings.assessments.clone();
    let ids = blocking(move || {
        let mut ids = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&root) {
            for e in entries.flatten() {
                if e.path().join(CONFIG).exists() {
                    ids.push(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    })
    .await?;
    let mut out = Vec::new();
    for id in ids {
        let path = app.path(&id)?;
        let busy = app.is_busy(&id);
        out.push(blocking(move || summary(&path, busy)).await?);
    }
    Ok(Json(json!({"assessments": out})))
}

async fn section(State(app): State<Shared>, Path((id, sid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let path = app.path(&id)?;
    let sid = section_param(&sid)?;
    let stored = blocking(move || AssessmentDir::open(&path)?.stored_section(sid)).await?;
    let stored = stored.ok_or_else(|| Error::not_found(format!("section {sid} has no draft yet")))?;
    Ok(Json(serde_json::to_value(stored).map_err(Error::from)?))
}

/// Applies a refinement with the assessment marked busy.
async fn refine(app: Shared, id: String, action: RefinementAction) -> ApiResult<Json<Value>> {
    let path = app.path(&id)?;
    let guard = app.claim(&id)?;
    let outcome = blocking(move || {
        let _guard = guard;
        let mut session = Session::open(&path, None)?;
        session.apply(&action)
    })
    .await?;
    Ok(Json(serde_json::to_value(outcome).map_err(Error::from)?))
}

#[derive(Debug, Deserialize)]
pub struct EditBody {
    pub body: String,
    pub actor: String,
}

async fn edit(
    State(app): State<Shared>,
    Path((id, sid)): Path<(String, String)>,
    Json(b): Json<EditBody>,
) -> ApiResult<Json<Value>> {
    let section_id = section_param(&sid)?;
    refine(app, id, RefinementAction::Edit { section_id, body: b.body, actor: b.actor }).await
}

#[derive(Debug, Deserialize)]
pub struct AppendBody {
    pub text: String,
    pub actor: String,
}

async fn append(
    State(app): State<Shared>,
    Path((id, sid)): Path<(String, String)>,
    Json(b): Json<AppendBody>,
) -> ApiResult<Json<Value>> {
    let section_id = section_param(&sid)?;
    refine(app, id, RefinementAction::Append { section_id, text: b.text, actor: b.actor }).await
}

#[derive(Debug, Deserialize)]
pub struct ReinvokeBody {
    pub instruction: String,
    pub actor: String,
}

async fn reinvoke(
    State(app): State<Shared>,
    Path((id, sid)): Path<(String, String)>,
    Json(b): Json<ReinvokeBody>,
) -> ApiResult<Json<Value>> {
    let section_id = section_param(&sid)?;
    refine(app, id, RefinementAction::Reinvoke { section_id, instruction: b.instruction, actor: b.actor }).await
}

#[derive(Debug, Deserialize)]
pub struct UploadBody {
    #[serde(default)]
    pub section_id: Option<SectionId>,
    pub document: UploadDocument,
    pub actor: String,
}

async fn upload(State(app): State<Shared>, Path(id): Path<String>, Json(b): Json<UploadBody>) -> ApiResult<Json<Value>> {
    refine(app, id, RefinementAction::Upload { section_id: b.section_id, document: b.document, actor: b.actor }).await
}

async fn evidence(State(app): State<Shared>, Path((id, eid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let path = app.path(&id)?;
    let eid: u64 = eid.parse().map_err(|_| Error::not_found(format!("no evidence record '{eid}'")))?;
    Ok(Json(blocking(move || evidence_record(&path, eid)).await?))
}

async fn evaluation(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let path = app.path(&id)?;
    let e = blocking(move || evaluate_all(&path)).await?;
    Ok(Json(serde_json::to_value(e).map_err(Error::from)?))
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    #[serde(default)]
    pub format: Option<String>,
}

async fn export_report(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let path = app.path(&id)?;
    let format: ExportFormat = q.format.as_deref().unwrap_or("md").parse()?;
    let text = blocking(move || export_dir(&path, format)).await?;
    let media = match format {
        ExportFormat::Markdown => "text/markdown; charset=utf-8",
        ExportFormat::Html => "text/html; charset=utf-8",
        ExportFormat::Json => "application/json",
    };
    Ok(([("content-type", media)], text).into_response())
}

async fn proposed(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let path = app.path(&id)?;
    let deltas = blocking(move || {
        let turns = AssessmentDir::open(&path)?.conversation()?;
        Ok(capture_preferences(&turns, DEFAULT_REPETITIONS))
    })
    .await?;
    Ok(Json(json!({"proposed": deltas})))
}

async fn preferences(State(app): State<Shared>) -> ApiResult<Json<Value>> {
    let root = app.settings.assessments.clone();
    let book = blocking(move || load_preferences(&root)).await?;
    Ok(Json(serde_json::to_value(book).map_err(Error::from)?))
}

async fn accept_preference(State(app): State<Shared>, Json(delta): Json<PreferenceDelta>) -> ApiResult<Json<Value>> {
    let root = app.settings.assessments.clone();
    let book = blocking(move || {
        let mut book = load_preferences(&root)?;
        book.accept(delta);
        save_preferences(&root, &book)?;
        Ok(book)
    })
    .await?;
    Ok(Json(serde_json::to_value(book).map_err(Error::from)?))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub after: Option<u64>,
    /// Keep the stream open while the assessment is busy (default true).
    #[serde(default)]
    pub follow: Option<bool>,
}

const POLL: Duration = Duration::from_millis(100);

struct Cursor {
    app: Shared,
    id: String,
    path: PathBuf,
    after: u64,
    pending: std::collections::VecDeque<tsa_core::state::ProgressEvent>,
    follow: bool,
}

fn sse_event(e: &tsa_core::state::ProgressEvent) -> Event {
    let kind = serde_json::to_value(e.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let data = serde_json::to_string(e).unwrap_or_default();
    Event::default().id(e.seq.to_string()).event(kind).data(data)
}

fn event_stream(c: Cursor) -> impl Stream<Item = core::result::Result<Event, Infallible>> {
    stream::unfold(c, |mut c| async move {
        loop {
            if let Some(e) = c.pending.pop_front() {
                c.after = e.seq;
                let ev = sse_event(&e);
                return Some((Ok(ev), c));
            }
            let busy = c.app.is_busy(&c.id);
            let path = c.path.clone();
            let after = c.after;
            let fresh = tokio::task::spawn_blocking(move || AssessmentDir::open(&path)?.events(after))
                .await
                .ok()
                .and_then(|r| r.ok())
                .unwrap_or_default();
            if !fresh.is_empty() {
                c.pending.extend(fresh);
                continue;
            }
            // Caught up: stop unless a run in this process may still write.
            if !c.follow || !busy {
                return None;
            }
            tokio::time::sleep(POLL).await;
        }
    })
}

async fn events(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let path = app.path(&id)?;
    let last = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse::<u64>().ok());
    let after = last.or(q.after).unwrap_or(0);
    let cursor = Cursor { app: app.clone(), id, path, after, pending: Default::default(), follow: q.follow.unwrap_or(true) };
    Ok(Sse::new(event_stream(cursor)).keep_alive(KeepAlive::default()).into_response())
}

async fn auth(State(app): State<Shared>, request: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        let ok = request
            .headers()
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let body = json!({"code": "unauthorized", "cause": null, "message": "missing or wrong bearer token"});
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(request).await
}

pub fn router(app: Shared) -> Router {
    Router::new()
        .route("/assessments", post(create).get(list))
        .route("/assessments/{id}", get(show))
        .route("/assessments/{id}/sections/{section}", get(section).patch(edit))
        .route("/assessments/{id}/sections/{section}/append", post(append))
        .route("/assessments/{id}/sections/{section}/reinvoke", post(reinvoke))
        .route("/assessments/{id}/uploads", post(upload))
        .route("/assessments/{id}/evidence/{evidence_id}", get(evidence))
        .route("/assessments/{id}/events", get(events))
        .route("/assessments/{id}/resume", post(resume))
        .route("/assessments/{id}/evaluation", get(evaluation))
        .route("/assessments/{id}/export", get(export_report))
        .route("/assessments/{id}/preferences", get(proposed))
        .route("/preferences", get(preferences).post(accept_preference))
        .route("/sections", get(|| async { Json(json!(ALL_SECTIONS.iter().map(|s| json!({"section_id": s, "title": s.title()})).collect::<Vec<_>>())) }))
        .layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app)
}
