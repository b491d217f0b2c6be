use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::multipart::{MultipartError, MultipartRejection};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use base64::Engine as _;
use drgrade::attribution::{integrated_gradients, render_overlay, IgConfig};
use drgrade::fundus::{FundusImage, GradeLabel};
use drgrade::model::{Model, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::{FeedbackDraft, FeedbackStore, Registry, ServiceConfig, ServiceError, MAX_IG_STEPS};

/// Number of recent predictions that feedback can refer to.
pub const PREDICTION_MEMORY: usize = 10_000;

pub const MAX_IMAGE_BYTES: usize = 20 * 1024 * 1024;
const PREDICT_BODY_LIMIT: usize = MAX_IMAGE_BYTES + 64 * 1024;
const MODEL_BODY_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Clone, Debug)]
struct RequestId(String);

#[derive(Clone, Debug)]
struct Remembered {
    image_sha256: String,
    model_id: String,
    grade: GradeLabel,
    probabilities: [f64; NUM_CLASSES],
}

/// Insertion-ordered map that forgets its oldest entries beyond `capacity`.
struct PredictionLog {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, Remembered>,
}

impl PredictionLog {
    fn new(capacity: usize) -> Self {
        PredictionLog {
            capacity,
            order: VecDeque::new(),
            entries: HashMap::new(),
        }
    }

    fn insert(&mut self, id: String, entry: Remembered) {
        if self.entries.insert(id.clone(), entry).is_none() {
            self.order.push_back(id);
        }
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }

    fn get(&self, id: &str) -> Option<&Remembered> {
        self.entries.get(id)
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub registry: Registry,
    pub feedback: Arc<dyn FeedbackStore>,
    started: Instant,
    predictions: Mutex<PredictionLog>,
}

impl AppState {
    pub fn new(config: ServiceConfig, registry: Registry, feedback: Arc<dyn FeedbackStore>) -> Self {
        AppState {
            config,
            registry,
            feedback,
            started: Instant::now(),
            predictions: Mutex::new(PredictionLog::new(PREDICTION_MEMORY)),
        }
    }
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameter", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        match e {
            ServiceError::DuplicateModel(_) => Self::new(StatusCode::CONFLICT, "duplicate_model", message),
            ServiceError::UnknownModel(_) => Self::new(StatusCode::NOT_FOUND, "unknown_model", message),
            ServiceError::InvalidModelId(_) => Self::invalid(message),
            ServiceError::Checkpoint { .. } => Self::new(StatusCode::BAD_REQUEST, "invalid_checkpoint", message),
            ServiceError::Config(_) | ServiceError::FeedbackLog(_) | ServiceError::Io(_) => Self::internal(message),
        }
    }
}

/// Serializes `result`, adding `request_id` to object bodies.
fn finish<T: Serialize>(rid: &RequestId, result: Result<(StatusCode, T), ApiError>) -> Response {
    let (status, mut body) = match result {
        Ok((status, body)) => match serde_json::to_value(body) {
            Ok(v) => (status, v),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, error_body(&ApiError::internal(e.to_string()))),
        },
        Err(e) => {
            if e.status.is_server_error() {
                tracing::error!(code = e.code, message = %e.message, request_id = %rid.0, "request failed");
            }
            (e.status, error_body(&e))
        }
    };
    if let Value::Object(map) = &mut body {
        map.insert("request_id".into(), Value::String(rid.0.clone()));
    }
    (status, Json(body)).into_response()
}

fn error_body(e: &ApiError) -> Value {
    json!({"error": {"code": e.code, "message": e.message}})
}

async fn assign_request_id(mut req: Request, next: Next) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    req.extensions_mut().insert(RequestId(id.clone()));
    let mut res = next.run(req).await;
    if let Ok(v) = HeaderValue::from_str(&id) {
        res.headers_mut().insert("x-request-id", v);
    }
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/predict", post(predict).layer(DefaultBodyLimit::max(PREDICT_BODY_LIMIT)))
        .route("/api/feedback", post(submit_feedback).get(list_feedback))
        .route(
            "/api/models",
            get(list_models).post(upload_model).layer(DefaultBodyLimit::max(MODEL_BODY_LIMIT)),
        )
        .route("/api/models/{id}/activate", post(activate_model))
        .route("/api/health", get(health))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn(assign_request_id))
        .with_state(state)
}

async fn not_found(Extension(rid): Extension<RequestId>) -> Response {
    finish::<()>(&rid, Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")))
}

async fn method_not_allowed(Extension(rid): Extension<RequestId>) -> Response {
    finish::<()>(
        &rid,
        Err(ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed here")),
    )
}

fn multipart_error(e: MultipartError, too_large_code: &'static str) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(StatusCode::BAD_REQUEST, too_large_code, "upload exceeds the size limit")
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

#[derive(Deserialize)]
struct PredictQuery {
    ig_steps: Option<usize>,
    include_overlay: Option<bool>,
}

#[derive(Serialize)]
struct PredictResponse {
    grade: GradeLabel,
    probabilities: [f64; NUM_CLASSES],
    model_id: String,
    /// Base64 PNG, absent when `include_overlay=false`.
    overlay: Option<String>,
    completeness_gap: Option<f64>,
    ig_steps: Option<usize>,
    image_sha256: String,
}

async fn read_image(mut mp: Multipart) -> Result<Vec<u8>, ApiError> {
    while let Some(field) = mp.next_field().await.map_err(|e| multipart_error(e, "image_too_large"))? {
        if field.name() == Some("image") {
            let bytes = field.bytes().await.map_err(|e| multipart_error(e, "image_too_large"))?;
            if bytes.len() > MAX_IMAGE_BYTES {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "image_too_large", "image exceeds 20 MB"));
            }
            return Ok(bytes.to_vec());
        }
    }
    Err(ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "multipart field \"image\" is required"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn grade_image(model: &Model, bytes: &[u8], steps: Option<usize>) -> Result<PredictResponse, ApiError> {
    let image_sha256 = sha256_hex(bytes);
    let img = FundusImage::decode(bytes, &image_sha256)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?;
    let pred = model.predict(&img).map_err(|e| ApiError::internal(e.to_string()))?;
    let (overlay, completeness_gap) = match steps {
        Some(steps) => {
            let config = IgConfig {
                steps,
                ..IgConfig::default()
            };
            let mask = integrated_gradients(model, &img, &config).map_err(|e| ApiError::internal(e.to_string()))?;
            let png = render_overlay(&mask, &img)
                .encode_png()
                .map_err(|e| ApiError::internal(e.to_string()))?;
            (Some(base64::engine::general_purpose::STANDARD.encode(png)), Some(mask.completeness_gap))
        }
        None => (None, None),
    };
    Ok(PredictResponse {
        grade: pred.grade,
        probabilities: pred.probabilities,
        model_id: model.id().to_string(),
        overlay,
        completeness_gap,
        ig_steps: steps,
        image_sha256,
    })
}

async fn predict(
    State(state): State<Arc<AppState>>,
    Extension(rid): Extension<RequestId>,
    query: Result<Query<PredictQuery>, QueryRejection>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Response {
    let result = async {
        let Query(q) = query.map_err(|e| ApiError::invalid(e.body_text()))?;
        let steps = q.ig_steps.unwrap_or(state.config.ig_steps);
        if !(1..=MAX_IG_STEPS).contains(&steps) {
            return Err(ApiError::invalid(format!("ig_steps must be in 1..={MAX_IG_STEPS}")));
        }
        let steps = q.include_overlay.unwrap_or(true).then_some(steps);
        let mp = multipart.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
        let bytes = read_image(mp).await?;
        // resolve the model once; a concurrent swap cannot change it mid-request
        let model = state.registry.active().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_active_model", "no model is active")
        })?;
        let image_dir = state.config.image_dir.clone();
        let response = tokio::task::spawn_blocking(move || {
            let response = grade_image(&model, &bytes, steps)?;
            if let Some(dir) = image_dir {
                let path = dir.join(&response.image_sha256);
                if !path.exists() {
                    std::fs::write(&path, &bytes).map_err(|e| ApiError::internal(e.to_string()))?;
                }
            }
            Ok::<_, ApiError>(response)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
        tracing::info!(request_id = %rid.0, image_sha256 = %response.image_sha256, model_id = %response.model_id, grade = %response.grade, "prediction");
        state.predictions.lock().expect("prediction log").insert(
            rid.0.clone(),
            Remembered {
                image_sha256: response.image_sha256.clone(),
                model_id: response.model_id.clone(),
                grade: response.grade,
                probabilities: response.probabilities,
            },
        );
        Ok((StatusCode::OK, response))
    }
    .await;
    finish(&rid, result)
}

#[derive(Deserialize)]
struct FeedbackRequest {
    request_id: String,
    clinician_grade: i64,
}

async fn submit_feedback(
    State(state): State<Arc<AppState>>,
    Extension(rid): Extension<RequestId>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Response {
    let result = async {
        let Json(req) = body.map_err(|e| match e {
            JsonRejection::JsonDataError(_) => ApiError::invalid(e.body_text()),
            _ => ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()),
        })?;
        let clinician_grade = GradeLabel::new(req.clinician_grade)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_grade", e.to_string()))?;
        let prediction = state
            .predictions
            .lock()
            .expect("prediction log")
            .get(&req.request_id)
            .cloned()
            .ok_or_else(|| {
                ApiError::new(
                    StatusCode::NOT_FOUND,
                    "unknown_request",
                    format!("no recent prediction with request_id {:?}", req.request_id),
                )
            })?;
        let draft = FeedbackDraft {
            request_id: req.request_id,
            image_sha256: prediction.image_sha256,
            model_id: prediction.model_id,
            predicted_grade: prediction.grade,
            probabilities: prediction.probabilities,
            clinician_grade,
        };
        let store = state.feedback.clone();
        let record = tokio::task::spawn_blocking(move || store.append(draft))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        Ok((StatusCode::CREATED, json!({"record_id": record.record_id})))
    }
    .await;
    finish(&rid, result)
}

#[derive(Deserialize)]
struct SinceQuery {
    since_id: Option<u64>,
}

/// A bare JSON array; the request id is only in the header.
async fn list_feedback(
    State(state): State<Arc<AppState>>,
    Extension(rid): Extension<RequestId>,
    query: Result<Query<SinceQuery>, QueryRejection>,
) -> Response {
    let result = query
        .map_err(|e| ApiError::invalid(e.body_text()))
        .map(|Query(q)| (StatusCode::OK, state.feedback.since(q.since_id.unwrap_or(0))));
    finish(&rid, result)
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    let expected = state.config.admin_token.as_bytes();
    let same_len = presented.len() == expected.len();
    let diff = presented
        .bytes()
        .zip(expected.iter().copied())
        .fold(0u8, |acc, (a, b)| acc | (a ^ b));
    if same_len && diff == 0 {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "a valid admin bearer token is required"))
    }
}

async fn list_models(
    State(state): State<Arc<AppState>>,
    Extension(rid): Extension<RequestId>,
    headers: HeaderMap,
) -> Response {
    let result = authorize(&state, &headers).map(|()| {
        (
            StatusCode::OK,
            json!({"models": state.registry.list(), "active_model": state.registry.active_id()}),
        )
    });
    finish(&rid, result)
}

async fn upload_model(
    State(state): State<Arc<AppState>>,
    Extension(rid): Extension<RequestId>,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Response {
    let result = async {
        authorize(&state, &headers)?;
        let mut mp = multipart.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
        let (mut model_id, mut checkpoint) = (None, None);
        while let Some(field) = mp.next_field().await.map_err(|e| multipart_error(e, "checkpoint_too_large"))? {
            match field.name() {
                Some("model_id") => {
                    model_id = Some(field.text().await.map_err(|e| multipart_error(e, "bad_request"))?);
                }
                Some("checkpoint") => {
                    checkpoint = Some(field.bytes().await.map_err(|e| multipart_error(e, "checkpoint_too_large"))?);
                }
                _ => {}
            }
        }
        let model_id = model_id.ok_or_else(|| ApiError::invalid("multipart field \"model_id\" is required"))?;
        let checkpoint = checkpoint.ok_or_else(|| ApiError::invalid("multipart field \"checkpoint\" is required"))?;
        let st = state.clone();
        let info = tokio::task::spawn_blocking(move || st.registry.register(model_id.trim(), &checkpoint))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        tracing::info!(model_id = %info.model_id, "model registered");
        Ok((StatusCode::CREATED, json!({"model": info})))
    }
    .await;
    finish(&rid, result)
}

async fn activate_model(
    State(state): State<Arc<AppState>>,
    Extension(rid): Extension<RequestId>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let result = async {
        authorize(&state, &headers)?;
        let st = state.clone();
        let target = id.clone();
        tokio::task::spawn_blocking(move || st.registry.activate(&target))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        tracing::info!(model_id = %id, "model activated");
        Ok((StatusCode::OK, json!({"active_model": id})))
    }
    .await;
    finish(&rid, result)
}

async fn health(State(state): State<Arc<AppState>>, Extension(rid): Extension<RequestId>) -> Response {
    let active = state.registry.active_id();
    let body = json!({
        "status": if active.is_some() { "ok" } else { "degraded" },
        "active_model": active,
        "uptime_seconds": state.started.elapsed().as_secs_f64(),
        "feedback_count": state.feedback.count(),
        "model_count": state.registry.list().len(),
    });
    finish(&rid, Ok((StatusCode::OK, body)))
}
