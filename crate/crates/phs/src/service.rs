//! HTTP/1.1 JSON facade over [`Engine`].
//!
//! | route                   | result                                  |
//! |-------------------------|-----------------------------------------|
//! | `GET /healthz`          | `{"ok":true}`                           |
//! | `GET /api/images`       | manifest entries, `?offset=&limit=`     |
//! | `GET /api/image/{id}`   | raw source bytes (HEAD gives length)    |
//! | `POST /api/query`       | [`QueryResponse`]                       |
//! | `GET /api/attention/{id}` | per-head CLS patch grids from cache   |
//!
//! Errors are `{"error": code, "message": text}` with status 400 (bad
//! request), 404 (unknown id), 409 (missing cache), 422 (empty mask under
//! the strict policy), or 500.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::api::{Engine, QueryRequest, Timing};
use crate::error::PhsError;

pub fn status_for(err: &PhsError) -> StatusCode {
    match err.code() {
        "bad_param" | "bad_prompt" | "bad_geometry" | "dimension_mismatch" | "non_finite" => StatusCode::BAD_REQUEST,
        "unknown_image" => StatusCode::NOT_FOUND,
        "missing_cache" => StatusCode::CONFLICT,
        "empty_mask" => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub struct ApiError(PhsError);

impl From<PhsError> for ApiError {
    fn from(e: PhsError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(&self.0), Json(self.0.to_json())).into_response()
    }
}

fn bad_request(msg: String) -> ApiError {
    ApiError(PhsError::Usage(msg))
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "ok": true }))
}

async fn images(State(e): State<Arc<Engine>>, page: Result<Query<Page>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(page) = page.map_err(|r| bad_request(r.body_text()))?;
    Ok(Json(e.images(page.offset, page.limit)).into_response())
}

async fn image(State(e): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let meta = e
        .manifest
        .get(&id)
        .ok_or_else(|| PhsError::from(phs_core::Error::UnknownImage(id.clone())))?;
    let (bytes, ctype) = e.manifest.source_bytes(meta)?;
    Ok(([(header::CONTENT_TYPE, ctype)], Body::from(bytes)).into_response())
}

async fn run_query(State(e): State<Arc<Engine>>, body: Result<Json<QueryRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|r| bad_request(r.body_text()))?;
    let start = Instant::now();
    let engine = e.clone();
    let mut resp = tokio::task::spawn_blocking(move || engine.query(&req))
        .await
        .map_err(|j| ApiError(PhsError::Usage(format!("query task failed: {j}"))))??;
    resp.timing = Some(Timing {
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok(Json(resp).into_response())
}

async fn attention(State(e): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(e.attention(&id)?).into_response())
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/images", get(images))
        .route("/api/image/{id}", get(image))
        .route("/api/query", post(run_query))
        .route("/api/attention/{id}", get(attention))
        .with_state(engine)
}

/// Serves until the process is stopped.
pub async fn serve(engine: Arc<Engine>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(engine)).await
}
