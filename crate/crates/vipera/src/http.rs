//! JSON API under `/api/v1`.
//!
//! Handlers run service calls on the blocking pool; long work is queued as
//! jobs and polled through `GET /api/v1/jobs/{job_id}`.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, patch, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;
use vipera_core::model::{BookmarkKind, CriterionId, ImageId, PromptId, SessionId, SuggestionId};

use crate::service::{ServiceError, Service};

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

fn snake_case(name: &str) -> String {
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_uppercase() && i > 0 {
            out.push('_');
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// Status code and machine-readable code for an error.
pub fn classify(e: &ServiceError) -> (StatusCode, String) {
    use vipera_core::Error as E;
    match e {
        ServiceError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session".into()),
        ServiceError::UnknownJob(_) => (StatusCode::NOT_FOUND, "unknown_job".into()),
        ServiceError::ImageNotReady(_) => (StatusCode::CONFLICT, "image_not_ready".into()),
        ServiceError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request".into()),
        ServiceError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage_failure".into()),
        ServiceError::Provider(_) => (StatusCode::BAD_GATEWAY, "provider_failure".into()),
        ServiceError::Domain(d) => {
            let debug = format!("{d:?}");
            let name = debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("domain");
            let status = match d {
                E::UnknownPrompt(_) | E::UnknownImage(_) | E::UnknownCriterion(_) | E::UnknownSuggestion(_) => StatusCode::NOT_FOUND,
                E::DuplicateCriterion { .. }
                | E::DuplicateChild(_)
                | E::SuggestionResolved(_)
                | E::StalePrompt(_)
                | E::SuggestionMismatch(_)
                | E::NoLabeledImages
                | E::NotEnoughImages => StatusCode::CONFLICT,
                _ => StatusCode::BAD_REQUEST,
            };
            (status, snake_case(name))
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = classify(&self.0);
        (status, Json(json!({"error": code, "message": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a blocking service call off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::InvalidRequest(format!("handler panicked: {e}"))))?
        .map_err(ApiError)
}

#[derive(Deserialize, Default)]
struct CreateSession {
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct AddPrompt {
    #[serde(default)]
    text: String,
    count: u32,
    base_suggestion: Option<SuggestionId>,
}

#[derive(Serialize)]
struct PromptCreated {
    prompt: vipera_core::model::Prompt,
    job_id: String,
}

#[derive(Deserialize)]
struct Selection {
    prompt_ids: Vec<PromptId>,
}

#[derive(Deserialize)]
struct GraphQuery {
    pruned: Option<bool>,
}

#[derive(Deserialize)]
struct AddNode {
    #[serde(default)]
    parent_path: Vec<String>,
    name: String,
}

#[derive(Deserialize)]
struct AddCriterion {
    parent_path: Vec<String>,
    name: String,
    candidates: Vec<String>,
}

#[derive(Serialize)]
struct CriterionCreated {
    criterion: vipera_core::model::Criterion,
    job_id: String,
}

#[derive(Deserialize)]
struct ImagesQuery {
    prompt: Option<PromptId>,
}

#[derive(Deserialize)]
struct Adopt {
    count: u32,
}

#[derive(Deserialize)]
struct AddBookmark {
    kind: BookmarkKind,
    #[serde(default)]
    target_ref: String,
    #[serde(default)]
    note_text: String,
}

async fn create_session(State(svc): State<Service>, body: Option<Json<CreateSession>>) -> ApiResult<impl IntoResponse> {
    let seed = body.map(|b| b.0).unwrap_or_default().seed;
    let s = blocking(move || svc.create_session(seed)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn list_sessions(State(svc): State<Service>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.list_sessions()).await?))
}

async fn get_session(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.session(&id)).await?))
}

async fn add_prompt(State(svc): State<Service>, Path(id): Path<SessionId>, Json(body): Json<AddPrompt>) -> ApiResult<impl IntoResponse> {
    let (prompt, job_id) = blocking(move || match &body.base_suggestion {
        None => svc.add_prompt(&id, &body.text, body.count),
        Some(sid) => {
            let record = svc
                .session(&id)?
                .suggestion(sid)
                .cloned()
                .ok_or_else(|| vipera_core::Error::UnknownSuggestion(sid.clone()))?;
            if let vipera_core::model::Suggestion::Prompt(p) = &record.suggestion {
                let text = body.text.trim();
                if !text.is_empty() && !text.eq_ignore_ascii_case(&p.suggested_text) {
                    return Err(ServiceError::InvalidRequest("text differs from the suggested prompt".into()));
                }
            }
            svc.adopt_suggestion(&id, sid, body.count)
        }
    })
    .await?;
    Ok((StatusCode::CREATED, Json(PromptCreated { prompt, job_id })))
}

async fn delete_prompt(State(svc): State<Service>, Path((id, pid)): Path<(SessionId, PromptId)>) -> ApiResult<impl IntoResponse> {
    blocking(move || svc.delete_prompt(&id, &pid)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn set_selection(State(svc): State<Service>, Path(id): Path<SessionId>, Json(body): Json<Selection>) -> ApiResult<impl IntoResponse> {
    let ids: BTreeSet<PromptId> = body.prompt_ids.into_iter().collect();
    let selected = blocking(move || svc.set_selection(&id, ids)).await?;
    Ok(Json(json!({"prompt_ids": selected})))
}

async fn get_graph(State(svc): State<Service>, Path(id): Path<SessionId>, Query(q): Query<GraphQuery>) -> ApiResult<impl IntoResponse> {
    let pruned = q.pruned.unwrap_or(true);
    Ok(Json(blocking(move || svc.graph(&id, pruned)).await?))
}

async fn add_node(State(svc): State<Service>, Path(id): Path<SessionId>, Json(body): Json<AddNode>) -> ApiResult<impl IntoResponse> {
    let path = blocking(move || svc.add_node(&id, &body.parent_path, &body.name)).await?;
    Ok((StatusCode::CREATED, Json(json!({"path": path}))))
}

async fn add_criterion(State(svc): State<Service>, Path(id): Path<SessionId>, Json(body): Json<AddCriterion>) -> ApiResult<impl IntoResponse> {
    let (criterion, job_id) = blocking(move || svc.add_criterion(&id, &body.parent_path, &body.name, &body.candidates)).await?;
    Ok((StatusCode::CREATED, Json(CriterionCreated { criterion, job_id })))
}

async fn delete_criterion(State(svc): State<Service>, Path((id, cid)): Path<(SessionId, CriterionId)>) -> ApiResult<impl IntoResponse> {
    blocking(move || svc.delete_criterion(&id, &cid)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_images(State(svc): State<Service>, Path(id): Path<SessionId>, Query(q): Query<ImagesQuery>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.images(&id, q.prompt.as_ref())).await?))
}

async fn image_file(State(svc): State<Service>, Path((id, iid)): Path<(SessionId, ImageId)>) -> ApiResult<impl IntoResponse> {
    let bytes = blocking(move || svc.image_file(&id, &iid)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

async fn image_labels(State(svc): State<Service>, Path((id, iid)): Path<(SessionId, ImageId)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.image_labels(&id, &iid)).await?))
}

async fn distribution(State(svc): State<Service>, Path((id, cid)): Path<(SessionId, CriterionId)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.distribution(&id, &cid)).await?))
}

async fn projection(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.projection(&id)).await?))
}

async fn suggestion_log(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.suggestions(&id)).await?))
}

async fn suggest_criteria(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.suggest_criteria(&id)).await?))
}

async fn suggest_prompts(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.suggest_prompts(&id)).await?))
}

async fn adopt(
    State(svc): State<Service>,
    Path((id, sid)): Path<(SessionId, SuggestionId)>,
    Json(body): Json<Adopt>,
) -> ApiResult<impl IntoResponse> {
    let (prompt, job_id) = blocking(move || svc.adopt_suggestion(&id, &sid, body.count)).await?;
    Ok((StatusCode::CREATED, Json(PromptCreated { prompt, job_id })))
}

async fn accept(State(svc): State<Service>, Path((id, sid)): Path<(SessionId, SuggestionId)>) -> ApiResult<impl IntoResponse> {
    let (criterion, job_id) = blocking(move || svc.accept_suggestion(&id, &sid)).await?;
    Ok((StatusCode::CREATED, Json(CriterionCreated { criterion, job_id })))
}

async fn dismiss(State(svc): State<Service>, Path((id, sid)): Path<(SessionId, SuggestionId)>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.dismiss_suggestion(&id, &sid)).await?))
}

async fn add_bookmark(State(svc): State<Service>, Path(id): Path<SessionId>, Json(body): Json<AddBookmark>) -> ApiResult<impl IntoResponse> {
    let b = blocking(move || svc.add_bookmark(&id, body.kind, &body.target_ref, &body.note_text)).await?;
    Ok((StatusCode::CREATED, Json(b)))
}

async fn report(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    let r = blocking(move || svc.export_report(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], r.markdown_text))
}

async fn session_jobs(State(svc): State<Service>, Path(id): Path<SessionId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.jobs(&id)).await?))
}

async fn job(State(svc): State<Service>, Path(job_id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.job(&job_id)?))
}

pub fn router(svc: Service, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/prompts", post(add_prompt))
        .route("/sessions/{id}/prompts/{pid}", delete(delete_prompt))
        .route("/sessions/{id}/selection", patch(set_selection))
        .route("/sessions/{id}/graph", get(get_graph))
        .route("/sessions/{id}/graph/nodes", post(add_node))
        .route("/sessions/{id}/criteria", post(add_criterion))
        .route("/sessions/{id}/criteria/{cid}", delete(delete_criterion))
        .route("/sessions/{id}/images", get(list_images))
        .route("/sessions/{id}/images/{iid}/file", get(image_file))
        .route("/sessions/{id}/images/{iid}/labels", get(image_labels))
        .route("/sessions/{id}/distributions/{cid}", get(distribution))
        .route("/sessions/{id}/projection", get(projection))
        .route("/sessions/{id}/suggestions", get(suggestion_log))
        .route("/sessions/{id}/suggestions/criteria", get(suggest_criteria))
        .route("/sessions/{id}/suggestions/prompts", get(suggest_prompts))
        .route("/sessions/{id}/suggestions/{sid}/adopt", post(adopt))
        .route("/sessions/{id}/suggestions/{sid}/accept", post(accept))
        .route("/sessions/{id}/suggestions/{sid}/dismiss", post(dismiss))
        .route("/sessions/{id}/bookmarks", post(add_bookmark))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/jobs", get(session_jobs))
        .route("/jobs/{job_id}", get(job));
    let app = Router::new().nest("/api/v1", api).with_state(svc);
    match assets {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serves the API (and optional static assets) until Ctrl-C.
pub async fn serve(svc: Service, addr: SocketAddr, assets: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc, assets))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
