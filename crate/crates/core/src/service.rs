//! Read-only HTTP render service.
//!
//! `GET /healthz`, `GET /model/info` and `POST /render`. Renders run on a
//! bounded pool of blocking workers; requests beyond the pool and its FIFO
//! queue are refused with 429.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use crate::error::Result;
use crate::io::container::load_model;
use crate::io::formats::encode_png;
use crate::io::CameraJson;
use crate::lighting::LightingSpec;
use crate::render::{render, RenderOptions};
use crate::scene::SceneModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServiceConfig {
    pub max_width: usize,
    pub max_height: usize,
    /// Concurrent renders.
    pub workers: usize,
    /// Requests allowed to wait for a worker.
    pub queue: usize,
    /// Black out pixels with predicted mask below 0.5.
    pub matte: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_width: 2048,
            max_height: 2048,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue: 16,
            matte: true,
        }
    }
}

fn default_output() -> String {
    "png".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Output size is the camera's `w`×`h`.
    pub camera: CameraJson,
    pub lighting: LightingSpec,
    #[serde(default = "default_output")]
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub points: usize,
    pub descriptor_width: usize,
    pub trained_steps: u64,
    pub lighting_modes: Vec<String>,
}

impl ModelInfo {
    pub fn of(model: &SceneModel) -> Self {
        Self {
            points: model.cloud.len(),
            descriptor_width: model.descriptors.width(),
            trained_steps: model.trained_steps,
            lighting_modes: LightingSpec::MODES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A request rejected before rendering, with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub status: StatusCode,
    pub message: String,
}

impl Rejection {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for Rejection {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// A parsed request with its lighting normalized.
#[derive(Clone, Debug)]
pub struct ValidRequest {
    pub camera: crate::scene::Camera,
    pub lighting: LightingSpec,
}

/// Parses and validates a request body without touching the model.
pub fn validate_request(body: &[u8], config: &ServiceConfig) -> std::result::Result<ValidRequest, Rejection> {
    let req: RenderRequest = serde_json::from_slice(body).map_err(|e| Rejection::bad(format!("malformed request: {e}")))?;
    if req.output != "png" {
        return Err(Rejection::bad(format!("output `{}` is not supported; use png", req.output)));
    }
    if req.camera.w == 0 || req.camera.h == 0 || req.camera.w > config.max_width || req.camera.h > config.max_height {
        return Err(Rejection::bad(format!(
            "canvas {}×{} outside 1×1..{}×{}",
            req.camera.w, req.camera.h, config.max_width, config.max_height
        )));
    }
    let camera = req.camera.to_camera().map_err(|e| Rejection::bad(format!("camera: {e}")))?;
    let lighting = req.lighting.normalized().map_err(|e| Rejection::bad(format!("lighting: {e}")))?;
    Ok(ValidRequest { camera, lighting })
}

/// The offline render path: render, matte, sRGB-encode to PNG.
pub fn render_png(model: &SceneModel, req: &ValidRequest, matte: bool) -> Result<Vec<u8>> {
    let opts = RenderOptions {
        matte_with_mask: matte,
        ..RenderOptions::default()
    };
    let img = render(model, &req.camera, &req.lighting, &opts)?;
    encode_png(&img, true)
}

pub struct Service {
    model: RwLock<Option<Arc<SceneModel>>>,
    config: ServiceConfig,
    permits: Semaphore,
    admitted: AtomicUsize,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(None),
            permits: Semaphore::new(config.workers.max(1)),
            admitted: AtomicUsize::new(0),
            config,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn model(&self) -> Option<Arc<SceneModel>> {
        self.model.read().expect("model lock").clone()
    }

    /// Replaces the served model atomically; in-flight renders keep the
    /// snapshot they started with.
    pub fn swap_model(&self, model: SceneModel) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    /// Loads a container fully, then swaps it in.
    pub fn load(&self, path: &Path) -> Result<()> {
        let model = load_model(path)?;
        model.validate()?;
        self.swap_model(model);
        Ok(())
    }
}

/// Releases an admission slot on drop.
struct Admission<'a>(&'a AtomicUsize);

impl Drop for Admission<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn healthz(State(svc): State<Arc<Service>>) -> Response {
    match svc.model() {
        Some(_) => (StatusCode::OK, "ok").into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, "model not loaded").into_response(),
    }
}

async fn model_info(State(svc): State<Arc<Service>>) -> Response {
    match svc.model() {
        Some(m) => Json(ModelInfo::of(&m)).into_response(),
        None => Rejection::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded").into_response(),
    }
}

async fn render_handler(State(svc): State<Arc<Service>>, body: Bytes) -> Response {
    let Some(model) = svc.model() else {
        return Rejection::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded").into_response();
    };
    let req = match validate_request(&body, &svc.config) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let limit = svc.config.workers.max(1) + svc.config.queue;
    if svc.admitted.fetch_add(1, Ordering::SeqCst) >= limit {
        svc.admitted.fetch_sub(1, Ordering::SeqCst);
        return Rejection::new(StatusCode::TOO_MANY_REQUESTS, "render queue is full").into_response();
    }
    let _slot = Admission(&svc.admitted);
    let Ok(_permit) = svc.permits.acquire().await else {
        return Rejection::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down").into_response();
    };
    let matte = svc.config.matte;
    let result = tokio::task::spawn_blocking(move || render_png(&model, &req, matte)).await;
    match result {
        Ok(Ok(png)) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Ok(Err(e)) => Rejection::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        Err(e) => Rejection::new(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")).into_response(),
    }
}

async fn not_found() -> Response {
    Rejection::new(StatusCode::NOT_FOUND, "no such route").into_response()
}

pub fn router(svc: Arc<Service>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model/info", get(model_info))
        .route("/render", post(render_handler))
        .fallback(not_found)
        .layer(cors)
        .with_state(svc)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(svc: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
