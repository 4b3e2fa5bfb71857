//! HTTP service: `POST /api/segment` and `GET /api/health`.
//!
//! The loaded pipeline sits behind an async read/write gate. Requests hold
//! a read guard for the whole inference, so [`ServiceState::load`] waits for
//! in-flight requests to drain before swapping.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::imaging::{encode_gray_png, GrayImage};
use crate::pipeline::{Mode, Pipeline, PipelineConfig, Segmentation, Timing};

pub const DEFAULT_PORT: u16 = 8750;
pub const PORT_ENV: &str = "USGROUND_PORT";
pub const CHECKPOINT_ENV: &str = "USGROUND_CHECKPOINT";
const BODY_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub detector: String,
    pub segmenter: String,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub boxes: Vec<BoundingBox>,
    /// Base64 PNG, 8-bit gray, 255 = foreground, same size as the input.
    pub mask: String,
    pub timing_ms: Timing,
    pub model_info: ModelInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
    /// Only on 422: the highest score among rejected boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_score: Option<f64>,
}

pub struct Loaded {
    pub pipeline: Pipeline,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Default)]
pub struct ServiceState {
    slot: Arc<RwLock<Option<Loaded>>>,
}

impl ServiceState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with(pipeline: Pipeline, checkpoint: Option<String>) -> Self {
        Self {
            slot: Arc::new(RwLock::new(Some(Loaded { pipeline, checkpoint }))),
        }
    }

    /// Swaps in a new pipeline once in-flight requests finish.
    pub async fn load(&self, pipeline: Pipeline, checkpoint: Option<String>) {
        *self.slot.write().await = Some(Loaded { pipeline, checkpoint });
    }

    pub async fn unload(&self) {
        *self.slot.write().await = None;
    }

    /// Names of the loaded backends; empty before a load.
    pub async fn backends(&self) -> Vec<String> {
        match &*self.slot.read().await {
            Some(l) => vec![l.pipeline.detector.name(), l.pipeline.segmenter.name()],
            None => Vec::new(),
        }
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/segment", post(segment))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Port from `USGROUND_PORT`, else the default.
pub fn port_from_env() -> Result<u16> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("{PORT_ENV}={v:?} is not a port number"))),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

pub async fn serve(state: ServiceState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    backends: Vec<String>,
}

async fn health(State(state): State<ServiceState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        backends: state.backends().await,
    })
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                detail: detail.into(),
                best_score: None,
            },
        }
    }

    fn bad(error: &str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, detail)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Prompt(_) | Error::Image(_) | Error::Dimension(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

struct SegmentForm {
    image: Vec<u8>,
    prompt: String,
    threshold: Option<f64>,
    mode: Option<Mode>,
}

async fn read_form(mut mp: Multipart) -> std::result::Result<SegmentForm, ApiError> {
    let (mut image, mut prompt, mut threshold, mut mode) = (None, None, None, None);
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::bad("multipart", e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad("multipart", e.body_text()))?;
        let text = || String::from_utf8_lossy(&bytes).trim().to_string();
        match name.as_str() {
            "image" => image = Some(bytes.to_vec()),
            "prompt" => prompt = Some(text()),
            "threshold" => {
                let t: f64 = text()
                    .parse()
                    .map_err(|_| ApiError::bad("threshold", format!("threshold {:?} is not a number", text())))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(ApiError::bad("threshold", format!("threshold {t} is outside [0, 1]")));
                }
                threshold = Some(t);
            }
            "mode" => mode = Some(text().parse::<Mode>().map_err(|e| ApiError::bad("mode", e.to_string()))?),
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ApiError::bad("image", "missing multipart field \"image\""))?;
    let prompt = prompt.unwrap_or_default();
    if prompt.is_empty() {
        return Err(ApiError::bad("prompt", "prompt is empty"));
    }
    Ok(SegmentForm {
        image,
        prompt,
        threshold,
        mode,
    })
}

async fn segment(State(state): State<ServiceState>, mp: Multipart) -> Response {
    match run_segment(state, mp).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn run_segment(state: ServiceState, mp: Multipart) -> std::result::Result<SegmentResponse, ApiError> {
    let form = read_form(mp).await?;
    let image = GrayImage::decode(&form.image).map_err(|e| ApiError::bad("image", format!("undecodable image: {e}")))?;
    let guard = state.slot.clone().read_owned().await;
    if guard.is_none() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_loaded",
            "no model is loaded",
        ));
    }
    let handle = tokio::task::spawn_blocking(move || -> Result<(Segmentation, ModelInfo)> {
        let loaded = guard.as_ref().expect("checked above");
        let p = &loaded.pipeline;
        let cfg = PipelineConfig {
            threshold: form.threshold.unwrap_or(p.config.threshold),
            mode: form.mode.unwrap_or(p.config.mode),
            ..p.config
        };
        let seg = p.run_with(&image, &form.prompt, &cfg)?;
        let info = ModelInfo {
            detector: p.detector.name(),
            segmenter: p.segmenter.name(),
            checkpoint: loaded.checkpoint.clone(),
        };
        Ok((seg, info))
    });
    let (seg, model_info) = handle
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    if seg.boxes.is_empty() {
        let mut e = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "no_detection",
            "no box scored above the threshold",
        );
        e.body.best_score = seg.best_score;
        return Err(e);
    }
    let png = encode_gray_png(seg.mask.height(), seg.mask.width(), &seg.mask.to_u8())?;
    Ok(SegmentResponse {
        boxes: seg.boxes,
        mask: base64::engine::general_purpose::STANDARD.encode(png),
        timing_ms: seg.timing,
        model_info,
    })
}

/// Decodes the `mask` field of a [`SegmentResponse`].
pub fn decode_mask_field(b64: &str) -> Result<crate::geometry::BinaryMask> {
    let png = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| Error::Record(format!("mask is not base64: {e}")))?;
    crate::imaging::decode_mask(&png)
}
