//! HTTP+JSON front end over [`Pipeline`].
//!
//! | method | path                              | body                         | success |
//! |--------|-----------------------------------|------------------------------|---------|
//! | POST   | `/edits`                          | multipart: `image`, `instruction`, optional `overrides` (JSON), `scene` (JSON), `mask_only` | 202 [`ApiRun`] |
//! | GET    | `/edits`                          |                              | 200 list of run ids |
//! | GET    | `/edits/{id}`                     |                              | 200 [`ApiRun`] |
//! | POST   | `/edits/{id}/rerun`               | JSON overrides               | 202 [`ApiRun`] |
//! | GET    | `/edits/{id}/artifacts/{name}`    |                              | 200 file bytes |
//! | GET    | `/healthz`                        |                              | 200 `{"status":"ok"}` |
//!
//! Errors are `{"error": message, "field": optional}` with 404 for unknown
//! runs, 413 for oversized uploads, 422 for invalid input and 503 plus
//! `Retry-After` when every worker is busy. The run schema lives in
//! `schema/api_run.schema.json`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use maskedit_core::language::{Instruction, ParsedPrompts};
use maskedit_core::mask::MaskSource;
use maskedit_core::metrics::MetricReport;
use maskedit_core::pipeline::{
    EditRequest, EditRun, ImageRef, Overrides, Pipeline, PromptSource, ReusePlan, RunStatus,
};
use maskedit_core::synthetic::Scene;
use maskedit_core::Error;
use serde::Serialize;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

pub const API_RUN_SCHEMA: &str = include_str!("../schema/api_run.schema.json");

/// Artifacts exposed as URLs, keyed by their API name.
const PUBLIC_ARTIFACTS: [(&str, &str); 5] = [
    ("input", maskedit_core::pipeline::INPUT),
    ("soft_mask", maskedit_core::pipeline::SOFT_MASK_PNG),
    ("mask", maskedit_core::pipeline::MASK),
    ("mask_overlay", maskedit_core::pipeline::MASK_OVERLAY),
    ("edited", maskedit_core::pipeline::EDITED),
];

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub workers: usize,
    pub max_upload_bytes: usize,
    /// Static bundle served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl ServiceOptions {
    pub fn from_pipeline(p: &Pipeline) -> Self {
        Self {
            workers: p.config().workers,
            max_upload_bytes: p.config().max_upload_bytes,
            ui_dir: None,
        }
    }
}

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
    permits: Arc<Semaphore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiArtifact {
    pub url: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    pub stage: String,
    pub message: String,
}

/// Wire view of a run.
#[derive(Debug, Clone, Serialize)]
pub struct ApiRun {
    pub id: String,
    pub status: RunStatus,
    pub parent_id: Option<String>,
    pub instruction: String,
    pub prompts: Option<ParsedPrompts>,
    pub prompt_source: Option<PromptSource>,
    pub description: Option<String>,
    pub mask_source: Option<MaskSource>,
    pub reuse: ReusePlan,
    pub encoding_ratio: f64,
    pub theta: f64,
    pub seed: u64,
    pub artifacts: BTreeMap<String, ApiArtifact>,
    pub timings: BTreeMap<String, f64>,
    pub metrics: Option<MetricReport>,
    pub error: Option<ApiError>,
}

impl ApiRun {
    pub fn from_run(run: &EditRun) -> Self {
        let artifacts = PUBLIC_ARTIFACTS
            .iter()
            .filter_map(|(key, file)| {
                run.artifacts.get(*file).map(|rec| {
                    (
                        key.to_string(),
                        ApiArtifact {
                            url: format!("/edits/{}/artifacts/{file}", run.id),
                            sha256: rec.sha256.clone(),
                        },
                    )
                })
            })
            .collect();
        Self {
            id: run.id.clone(),
            status: run.status,
            parent_id: run.parent_id.clone(),
            instruction: run.instruction.clone(),
            prompts: run.prompts.clone(),
            prompt_source: run.prompt_source,
            description: run.description.as_ref().map(|d| d.text.clone()),
            mask_source: run.mask_source,
            reuse: run.reuse,
            encoding_ratio: run.config.edit.encoding_ratio,
            theta: run.config.mask.theta,
            seed: run.config.edit.seed,
            artifacts,
            timings: run.timings.clone(),
            metrics: run.metrics.clone(),
            error: run.error.as_ref().map(|e| ApiError {
                stage: e.stage.clone(),
                message: if e.user_facing {
                    e.message.clone()
                } else {
                    format!("internal error during {}", e.stage)
                },
            }),
        }
    }
}

#[derive(Debug)]
pub struct ApiFailure {
    status: StatusCode,
    message: String,
    field: Option<&'static str>,
}

impl ApiFailure {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            field: Some(field),
        }
    }

    fn from_core(e: Error, field: &'static str) -> Self {
        match e {
            Error::UnknownRun(id) => Self::new(StatusCode::NOT_FOUND, format!("unknown run {id}")),
            e if e.is_user_facing() => Self::invalid(field, e.to_string()),
            e => {
                tracing::error!("request failed: {e}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
            }
        }
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = f.into();
        }
        let mut resp = (self.status, Json(body)).into_response();
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        }
        resp
    }
}

type ApiResult<T> = Result<T, ApiFailure>;

pub fn router(pipeline: Arc<Pipeline>, opts: ServiceOptions) -> Router {
    let state = AppState {
        pipeline,
        permits: Arc::new(Semaphore::new(opts.workers.max(1))),
    };
    let mut app = Router::new()
        .route("/healthz", get(healthz))
        .route("/edits", post(submit).get(list))
        .route("/edits/{id}", get(get_run))
        .route("/edits/{id}/rerun", post(rerun))
        .route("/edits/{id}/artifacts/{*name}", get(artifact))
        .layer(DefaultBodyLimit::max(opts.max_upload_bytes))
        .with_state(state);
    if let Some(dir) = opts.ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app
}

pub async fn serve(pipeline: Arc<Pipeline>, opts: ServiceOptions, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(pipeline, opts)).await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn busy() -> ApiFailure {
    ApiFailure::new(StatusCode::SERVICE_UNAVAILABLE, "all workers busy; retry later")
}

fn spawn_execution(state: &AppState, id: String, permit: OwnedSemaphorePermit) {
    let pipeline = state.pipeline.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        if let Err(e) = pipeline.execute(&id) {
            tracing::error!(run = %id, "run store failure: {e}");
        }
    });
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|_| ApiFailure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error"))
}

async fn submit(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<Response> {
    let mut image = None;
    let mut instruction = None;
    let mut overrides = Overrides::default();
    let mut scene = None;
    let mut mask_only = false;
    let field_err = |e: axum::extract::multipart::MultipartError| ApiFailure::new(e.status(), e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(field_err)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => image = Some(field.bytes().await.map_err(field_err)?.to_vec()),
            "instruction" => instruction = Some(field.text().await.map_err(field_err)?),
            "overrides" => {
                let text = field.text().await.map_err(field_err)?;
                if !text.trim().is_empty() {
                    overrides = serde_json::from_str(&text).map_err(|e| ApiFailure::invalid("overrides", e.to_string()))?;
                }
            }
            "scene" => {
                let text = field.text().await.map_err(field_err)?;
                scene = Some(Scene::from_json(&text).map_err(|e| ApiFailure::invalid("scene", e.to_string()))?);
            }
            "mask_only" => mask_only = matches!(field.text().await.map_err(field_err)?.trim(), "1" | "true"),
            other => return Err(ApiFailure::invalid("multipart", format!("unexpected field `{other}`"))),
        }
    }
    let instruction = instruction.unwrap_or_default();
    Instruction::new(&instruction).map_err(|e| ApiFailure::invalid("instruction", e.to_string()))?;
    let image = image.filter(|b| !b.is_empty()).ok_or_else(|| ApiFailure::invalid("image", "image is required"))?;
    overrides.validate().map_err(|e| ApiFailure::invalid("overrides", e.to_string()))?;

    let permit = state.permits.clone().try_acquire_owned().map_err(|_| busy())?;
    let req = EditRequest {
        image: ImageRef::Bytes(image),
        instruction,
        overrides,
        scene,
        mask_only,
    };
    let pipeline = state.pipeline.clone();
    let run = blocking(move || pipeline.create_run(&req)).await?.map_err(|e| {
        let field = if matches!(e, Error::Image(_)) { "image" } else { "overrides" };
        ApiFailure::from_core(e, field)
    })?;
    let body = ApiRun::from_run(&run);
    spawn_execution(&state, run.id, permit);
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn rerun(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let overrides: Overrides = if body.is_empty() {
        Overrides::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiFailure::invalid("overrides", e.to_string()))?
    };
    overrides.validate().map_err(|e| ApiFailure::invalid("overrides", e.to_string()))?;
    let permit = state.permits.clone().try_acquire_owned().map_err(|_| busy())?;
    let pipeline = state.pipeline.clone();
    let run = blocking(move || pipeline.create_rerun(&id, &overrides))
        .await?
        .map_err(|e| ApiFailure::from_core(e, "overrides"))?;
    let body = ApiRun::from_run(&run);
    spawn_execution(&state, run.id, permit);
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ApiRun>> {
    let pipeline = state.pipeline.clone();
    let run = blocking(move || pipeline.get_run(&id))
        .await?
        .map_err(|e| ApiFailure::from_core(e, "id"))?;
    Ok(Json(ApiRun::from_run(&run)))
}

async fn list(State(state): State<AppState>) -> ApiResult<Json<Vec<String>>> {
    let pipeline = state.pipeline.clone();
    let ids = blocking(move || pipeline.store().list())
        .await?
        .map_err(|e| ApiFailure::from_core(e, "id"))?;
    Ok(Json(ids))
}

fn content_type(name: &str) -> &'static str {
    match name.rsplit('.').next() {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

async fn artifact(State(state): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let pipeline = state.pipeline.clone();
    let lookup = name.clone();
    let bytes = blocking(move || -> maskedit_core::Result<Option<Vec<u8>>> {
        let run = pipeline.get_run(&id)?;
        if !run.has_artifact(&lookup) {
            return Ok(None);
        }
        pipeline.store().read_artifact(&id, &lookup).map(Some)
    })
    .await?
    .map_err(|e| ApiFailure::from_core(e, "id"))?
    .ok_or_else(|| ApiFailure::new(StatusCode::NOT_FOUND, format!("no artifact `{name}` at the current status")))?;
    Ok(([(header::CONTENT_TYPE, content_type(&name))], bytes).into_response())
}
