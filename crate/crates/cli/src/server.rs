//! HTTP service: health, decomposition and sample scenes, plus the static
//! UI bundle.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use revealtoy_core::codec::{encode_png_rgb, BoundingBox};
use revealtoy_core::synth::{generate_scene, scene_seed, GeneratorConfig};
use serde::Serialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::api::{handle_decompose, DecomposeRequest, FieldError, Model, ServeError};

pub const MAX_BODY: usize = 8 * 1024 * 1024;
pub const MAX_SCENES: usize = 16;

pub struct AppState {
    pub model: Model,
    scene_counter: AtomicU64,
    scene_seed: u64,
}

impl AppState {
    pub fn new(model: Model, scene_seed: u64) -> Self {
        AppState {
            model,
            scene_counter: AtomicU64::new(0),
            scene_seed,
        }
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/decompose", post(decompose))
        .route("/api/scenes", get(scenes))
        .layer(DefaultBodyLimit::disable())
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

fn error_response(status: StatusCode, error: &str, field: Option<&str>) -> Response {
    (status, Json(json!({ "error": error, "field": field }))).into_response()
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        match self {
            ServeError::Invalid(FieldError { error, field }) => {
                error_response(StatusCode::BAD_REQUEST, &error, Some(&field))
            }
            ServeError::Internal(msg) => {
                log::error!("decompose failed: {msg}");
                error_response(StatusCode::INTERNAL_SERVER_ERROR, &msg, None)
            }
        }
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint": state.model.id }))
}

fn too_large() -> Response {
    error_response(
        StatusCode::PAYLOAD_TOO_LARGE,
        &format!("request body exceeds {MAX_BODY} bytes"),
        Some("body"),
    )
}

async fn decompose(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Body) -> Response {
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > MAX_BODY) {
        return too_large();
    }
    let Ok(bytes) = to_bytes(body, MAX_BODY).await else {
        return too_large();
    };
    let req: DecomposeRequest = match serde_json::from_slice(&bytes) {
        Ok(r) => r,
        Err(e) => {
            return error_response(StatusCode::BAD_REQUEST, &format!("invalid JSON: {e}"), Some("body"));
        }
    };
    let n_boxes = req.boxes.len();
    let task = tokio::task::spawn_blocking(move || handle_decompose(&state.model, &req));
    match task.await {
        Ok(Ok(resp)) => {
            log::info!(
                "decompose: {n_boxes} boxes, {} steps, {} ms",
                resp.steps,
                resp.timings_ms.inference
            );
            Json(resp).into_response()
        }
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServeError::Internal(format!("worker failed: {e}")).into_response(),
    }
}

#[derive(Serialize)]
pub struct SceneOut {
    pub seed: u64,
    /// Base64 RGB PNG.
    pub composite: String,
    pub boxes: Vec<BoundingBox>,
}

async fn scenes(
    State(state): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let n = match q.get("n").map(|v| v.parse::<usize>()) {
        None => 1,
        Some(Ok(n)) => n,
        Some(Err(_)) => 0,
    };
    if !(1..=MAX_SCENES).contains(&n) {
        return error_response(
            StatusCode::BAD_REQUEST,
            &format!("n must lie in 1..={MAX_SCENES}"),
            Some("n"),
        );
    }
    let m = &state.model.config.model;
    let gen = GeneratorConfig {
        canvas: m.canvas,
        patch: m.patch,
        size_min: m.canvas as f64 / 8.0,
        size_max: m.canvas as f64 * 9.0 / 32.0,
        ..Default::default()
    };
    let first = state.scene_counter.fetch_add(n as u64, Ordering::Relaxed);
    let out: Result<Vec<SceneOut>, revealtoy_core::Error> = (first..first + n as u64)
        .map(|i| {
            let seed = scene_seed(state.scene_seed, i);
            let rec = generate_scene(&gen, seed)?;
            Ok(SceneOut {
                seed,
                composite: B64.encode(encode_png_rgb(&rec.scene.composite)?),
                boxes: rec.scene.boxes,
            })
        })
        .collect();
    match out {
        Ok(scenes) => Json(json!({ "scenes": scenes })).into_response(),
        Err(e) => ServeError::Internal(e.to_string()).into_response(),
    }
}
