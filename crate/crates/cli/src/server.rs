//! Read-only HTTP inspection service over one checkpoint and one dataset.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;

use miniyolo::checkpoint::Checkpoint;
use miniyolo::data::{decode_png, encode_png, image_to_tensor, shift_image, DatasetFiles, Sample};
use miniyolo::postprocess::NmsConfig;
use miniyolo::{Error, ForwardOutput};

use crate::payload::{saliency_payload, ConfigPayload, InferPayload, SaliencyRequest, SCHEMA_VERSION};

/// Forward results kept before the cache is flushed.
const CACHE_CAPACITY: usize = 256;

pub struct AppState {
    pub ckpt: Checkpoint,
    pub data: DatasetFiles,
    pub nms: NmsConfig,
    cache: Mutex<HashMap<[u8; 32], Arc<ForwardOutput>>>,
}

impl AppState {
    pub fn new(ckpt: Checkpoint, data: DatasetFiles) -> Self {
        Self {
            ckpt,
            data,
            nms: NmsConfig::default(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn sample(&self, id: &str) -> Result<&Sample, ApiError> {
        self.data
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id `{id}`")))
    }

    /// Forward pass, cached by a hash of the pixel content.
    fn forward(&self, img: &image::RgbImage) -> Result<Arc<ForwardOutput>, ApiError> {
        let mut h = Sha256::new();
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.as_raw());
        let key: [u8; 32] = h.finalize().into();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let out = Arc::new(self.ckpt.state.forward(&image_to_tensor(img))?);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(key, out.clone());
        Ok(out)
    }

    fn infer(&self, img: &image::RgbImage) -> Result<InferPayload, ApiError> {
        let out = self.forward(img)?;
        Ok(InferPayload::new(
            &out,
            &self.ckpt.state.config,
            &self.ckpt.anchors,
            &self.nms,
        ))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::BorderCell { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::NoQualifyingImages { .. } => StatusCode::NOT_FOUND,
            Error::Invalid(_) | Error::UnknownTap(_) | Error::Config(_) | Error::Shape { .. } | Error::Image(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody {
    v: u32,
    error: ErrorDetail,
}

#[derive(Serialize)]
struct ErrorDetail {
    status: u16,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            v: SCHEMA_VERSION,
            error: ErrorDetail {
                status: self.status.as_u16(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

/// JSON body extractor that reports every malformed body as 400.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(rej) => Err(ApiError::bad_request(match rej {
                JsonRejection::MissingJsonContentType(_) => "expected Content-Type: application/json".to_string(),
                other => other.body_text(),
            })),
        }
    }
}

type Shared = Arc<AppState>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn config(State(app): State<Shared>) -> Json<ConfigPayload> {
    Json(ConfigPayload::new(&app.ckpt.state.config, &app.ckpt.anchors, &app.nms))
}

#[derive(Serialize)]
struct ImageEntry<'a> {
    id: &'a str,
    split: &'static str,
    annotations: &'a [miniyolo::assign::Annotation],
}

#[derive(Serialize)]
struct ImageList<'a> {
    v: u32,
    images: Vec<ImageEntry<'a>>,
}

async fn images(State(app): State<Shared>) -> Response {
    let list = ImageList {
        v: SCHEMA_VERSION,
        images: app
            .data
            .train
            .samples
            .iter()
            .map(|s| (s, "train"))
            .chain(app.data.val.samples.iter().map(|s| (s, "val")))
            .map(|(s, split)| ImageEntry {
                id: &s.id,
                split,
                annotations: &s.annotations,
            })
            .collect(),
    };
    Json(list).into_response()
}

async fn image_png(State(app): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let png = encode_png(&app.sample(&id)?.image)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InferRequest {
    image_id: Option<String>,
    png_base64: Option<String>,
}

async fn infer(State(app): State<Shared>, ApiJson(req): ApiJson<InferRequest>) -> Result<Json<InferPayload>, ApiError> {
    blocking(move || {
        let img = match (req.image_id, req.png_base64) {
            (Some(id), None) => app.sample(&id)?.image.clone(),
            (None, Some(b64)) => {
                let bytes = STANDARD
                    .decode(b64.as_bytes())
                    .map_err(|e| ApiError::bad_request(format!("png_base64: {e}")))?;
                let img = decode_png(&bytes)?;
                let n = app.ckpt.state.config.input_size as u32;
                if img.width() != n || img.height() != n {
                    return Err(ApiError::bad_request(format!(
                        "image is {}x{}, the model expects {n}x{n}",
                        img.width(),
                        img.height()
                    )));
                }
                img
            }
            _ => {
                return Err(ApiError::bad_request(
                    "exactly one of image_id and png_base64 is required",
                ))
            }
        };
        app.infer(&img)
    })
    .await
    .map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ShiftRequest {
    image_id: String,
    dx: i64,
    dy: i64,
}

async fn shift(State(app): State<Shared>, ApiJson(req): ApiJson<ShiftRequest>) -> Result<Json<InferPayload>, ApiError> {
    blocking(move || {
        let limit = app.ckpt.state.config.input_size as i64;
        if req.dx.abs() > limit || req.dy.abs() > limit {
            return Err(ApiError::bad_request(format!("dx and dy must lie within ±{limit}")));
        }
        let img = shift_image(&app.sample(&req.image_id)?.image, req.dx, req.dy);
        app.infer(&img)
    })
    .await
    .map(Json)
}

async fn saliency(
    State(app): State<Shared>,
    ApiJson(req): ApiJson<SaliencyRequest>,
) -> Result<Json<crate::payload::SaliencyPayload>, ApiError> {
    blocking(move || {
        let samples: Vec<&Sample> = app.data.all().collect();
        Ok(saliency_payload(&app.ckpt.state, samples.iter().copied(), &req)?)
    })
    .await
    .map(Json)
}

/// The API routes, with `static_dir` (if any) served under `/`.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/config", get(config))
        .route("/api/images", get(images))
        .route("/api/image/{id}", get(image_png))
        .route("/api/infer", post(infer))
        .route("/api/shift", post(shift))
        .route("/api/saliency", post(saliency))
        .with_state(Arc::new(state));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: AppState, addr: &str, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}
