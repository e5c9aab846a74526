//! HTTP/JSON API over the store and runner.
//!
//! Errors are JSON objects `{"error": ..., "path": ...}` with status 404 for
//! unknown ids, 409 for state conflicts and 422 for invalid payloads.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sgedit_core::pipeline::PipelineConfig;
use sgedit_core::scenegraph::{EditOp, GraphError, SceneGraph};
use sgedit_core::Image;

use crate::runner::Runner;
use crate::store::{Job, JobStatus, Session, Store, StoreError};

/// Largest accepted upload side, in pixels.
pub const MAX_SIDE: usize = 2048;

pub struct AppState {
    pub store: Arc<Store>,
    pub runner: Runner,
    /// Pipeline config for jobs submitted without a spec.
    pub default_spec: PipelineConfig,
    /// Predicates offered by the editor in addition to those in the graph.
    pub extra_predicates: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            path: None,
        }
    }

    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            path: Some(path.into()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "path": self.path}))).into_response()
    }
}

fn graph_error(prefix: &str, e: GraphError) -> ApiError {
    let join = |p: &str| if prefix.is_empty() { p.to_string() } else { format!("{prefix}.{p}") };
    match e {
        GraphError::Parse { path, message } | GraphError::Validation { path, message } => {
            ApiError::invalid(join(&path), message)
        }
        GraphError::NodeNotFound(_) | GraphError::DuplicateId(_) => ApiError::invalid(join("target_id"), e.to_string()),
        GraphError::EdgeNotFound(_) => ApiError::invalid(join("edge_change.old"), e.to_string()),
        other => ApiError::invalid(join("."), other.to_string()),
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSession(_) | StoreError::UnknownJob(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
            StoreError::NothingPending(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            StoreError::Graph(g) => graph_error("", g),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

fn parse_body(body: &Bytes) -> ApiResult<Value> {
    if body.is_empty() {
        return Ok(json!({}));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(".", format!("invalid JSON: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/image", get(get_session_image))
        .route("/sessions/{id}/ops", post(post_op))
        .route("/sessions/{id}/jobs", post(post_job))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(get_result))
        .route("/jobs/{id}/result.png", get(get_result_png))
        .route("/jobs/{id}/steps/{n}", get(get_step))
        .route("/jobs/{id}/steps/{n}/{file}", get(get_step_file))
        .with_state(state)
}

async fn health(State(st): Shared) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "data": st.store.root(),
    }))
}

#[derive(Serialize)]
struct SessionView {
    #[serde(flatten)]
    session: Session,
    pending_ops: usize,
    predicates: Vec<String>,
    width: u32,
    height: u32,
}

fn view(st: &AppState, session: Session) -> SessionView {
    let mut predicates: BTreeSet<String> = session.original_graph.predicates().into_iter().collect();
    predicates.extend(session.graph.predicates());
    predicates.extend(st.extra_predicates.iter().cloned());
    SessionView {
        pending_ops: session.pending_ops().len(),
        predicates: predicates.into_iter().collect(),
        width: session.graph.width,
        height: session.graph.height,
        session,
    }
}

/// Body: `{"image": <base64 PNG>, "graph": <scene graph>}`.
async fn create_session(State(st): Shared, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut v = parse_body(&body)?;
    let image_b64 = v
        .get("image")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::invalid("image", "missing base64 PNG string"))?;
    let bytes = B64
        .decode(image_b64)
        .map_err(|e| ApiError::invalid("image", format!("invalid base64: {e}")))?;
    let (w, h) = Image::probe_dimensions(&bytes).map_err(|e| ApiError::invalid("image", e.to_string()))?;
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(ApiError::invalid(
            "image",
            format!("{w}x{h} exceeds the {MAX_SIDE}x{MAX_SIDE} limit"),
        ));
    }
    let image = Image::decode_png(&bytes).map_err(|e| ApiError::invalid("image", e.to_string()))?;
    let graph_value = v
        .get_mut("graph")
        .map(Value::take)
        .ok_or_else(|| ApiError::invalid("graph", "missing scene graph"))?;
    let graph = SceneGraph::from_json_value(graph_value).map_err(|e| graph_error("graph", e))?;
    if (graph.width as usize, graph.height as usize) != (w, h) {
        return Err(ApiError::invalid(
            "graph.width",
            format!("graph is {}x{} but the image is {w}x{h}", graph.width, graph.height),
        ));
    }
    let session = st.store.create_session(&image, graph)?;
    Ok((StatusCode::CREATED, Json(json!({"id": session.id}))))
}

async fn get_session(State(st): Shared, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = st.store.session(&id)?;
    Ok(Json(view(&st, s)))
}

async fn get_session_image(State(st): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    st.store.session(&id)?;
    let bytes = std::fs::read(st.store.session_image_path(&id))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn post_op(State(st): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SessionView>> {
    st.store.session(&id)?;
    let op = EditOp::from_json_value(parse_body(&body)?).map_err(|e| graph_error("", e))?;
    let s = st.store.apply_op(&id, op)?;
    Ok(Json(view(&st, s)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    #[serde(default)]
    spec: Option<PipelineConfig>,
}

async fn post_job(State(st): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    st.store.session(&id)?;
    let req: JobRequest = serde_path_to_error::deserialize(parse_body(&body)?)
        .map_err(|e| ApiError::invalid(e.path().to_string(), e.inner().to_string()))?;
    let spec = req.spec.unwrap_or_else(|| st.default_spec.clone());
    spec.inpaint
        .validate()
        .map_err(|e| ApiError::invalid("spec.inpaint", e.to_string()))?;
    let job = st.store.create_job(&id, spec)?;
    st.runner.submit(&job.id);
    Ok((StatusCode::ACCEPTED, Json(json!({"id": job.id, "status": job.status}))))
}

async fn list_jobs(State(st): Shared) -> ApiResult<Json<Vec<Job>>> {
    Ok(Json(st.store.jobs()?))
}

async fn get_job(State(st): Shared, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    Ok(Json(st.store.job(&id)?))
}

fn done_job(st: &AppState, id: &str) -> ApiResult<Job> {
    let job = st.store.job(id)?;
    if job.status != JobStatus::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job `{id}` is {:?}, not done", job.status),
        ));
    }
    Ok(job)
}

async fn get_result(State(st): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = done_job(&st, &id)?;
    let png = std::fs::read(st.store.work_dir(&id).join("result.png"))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(json!({
        "id": job.id,
        "image": B64.encode(png),
        "metrics": job.metrics,
        "artifacts": job.artifacts,
    })))
}

async fn get_result_png(State(st): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    done_job(&st, &id)?;
    let png = std::fs::read(st.store.work_dir(&id).join("result.png"))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn step_dir_name(st: &AppState, id: &str, n: usize) -> ApiResult<String> {
    st.store.job(id)?;
    let steps = st.store.work_dir(id).join("steps");
    let prefix = format!("{n:02}_");
    std::fs::read_dir(&steps)
        .ok()
        .and_then(|entries| {
            entries
                .flatten()
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .find(|name| name.starts_with(&prefix))
        })
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("job `{id}` has no step {n} yet")))
}

async fn get_step(State(st): Shared, Path((id, n)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    let name = step_dir_name(&st, &id, n)?;
    let dir = st.store.work_dir(&id).join("steps").join(&name);
    let mut files: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .flatten()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    let complete = files.iter().any(|f| f == "state.json");
    Ok(Json(json!({
        "index": n,
        "dir": format!("steps/{name}"),
        "step": name.split_once('_').map(|(_, s)| s),
        "complete": complete,
        "files": files,
    })))
}

async fn get_step_file(
    State(st): Shared,
    Path((id, n, file)): Path<(String, usize, String)>,
) -> ApiResult<Response> {
    if file.contains('/') || file.contains("..") {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no such artifact"));
    }
    let name = step_dir_name(&st, &id, n)?;
    let path = st.store.work_dir(&id).join("steps").join(name).join(&file);
    let bytes = std::fs::read(&path).map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no artifact `{file}`")))?;
    let ty = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("csv") => "text/csv",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, ty)], bytes).into_response())
}
