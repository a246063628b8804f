//! JSON-over-HTTP inference service.
//!
//! Endpoints:
//!
//! * `POST /predict` runs one of three modes on a base64 PNG. `auto` uses
//!   learned prompts only and rejects any prompt field; `manual` bypasses the
//!   predictor and needs at least one prompt; `semi` appends optional manual
//!   prompts after the learned ones.
//! * `POST /sessions`, `POST /sessions/{id}/refine`, `GET /sessions/{id}` and
//!   `POST /sessions/{id}/accept` drive the interactive labeling loop.
//!
//! Point and box coordinates travel in original image pixels. A brush mask
//! is run-length encoded at the model's mask-prompt resolution and covers
//! the padded model square (see `geometry` in responses). Masks come back
//! run-length encoded at the original image size.

pub mod rle;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use promptseg::backbone::{BinaryMask, ImageEmbedding, ManualPrompts, PointLabel, PointPrompt, SegmentationResult};
use promptseg::data::io::{decode_image, encode_mask_png};
use promptseg::data::{resize_pad, PadRecord, Sample};
use promptseg::model::PromptSegmenter;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use crate::rle::RleMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub checkpoint: Option<PathBuf>,
    pub session_ttl_seconds: u64,
    /// Limit on the decoded upload size.
    pub max_image_bytes: usize,
    /// Limit on either side of an uploaded image.
    pub max_image_side: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            checkpoint: None,
            session_ttl_seconds: 3600,
            max_image_bytes: 16 << 20,
            max_image_side: 4096,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", format!("no session `{id}`"))
    }
}

impl From<promptseg::Error> for ApiError {
    fn from(e: promptseg::Error) -> Self {
        let status = match &e {
            promptseg::Error::Input(_) => StatusCode::BAD_REQUEST,
            promptseg::Error::Image(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Auto,
    Manual,
    Semi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

/// Prompts in original image pixels (brush at mask-prompt resolution).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePrompts {
    #[serde(default)]
    pub points: Vec<WirePoint>,
    #[serde(default)]
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brush_mask: Option<RleMask>,
}

impl WirePrompts {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty() && self.brush_mask.is_none()
    }

    fn merged(&self, later: &WirePrompts) -> WirePrompts {
        let mut out = self.clone();
        out.points.extend_from_slice(&later.points);
        out.boxes.extend_from_slice(&later.boxes);
        if later.brush_mask.is_some() {
            out.brush_mask = later.brush_mask.clone();
        }
        out
    }

    fn to_model(&self, pad: &PadRecord) -> ApiResult<ManualPrompts> {
        let (w, h) = (pad.original_width as f64, pad.original_height as f64);
        let inside = |x: f64, y: f64| x.is_finite() && y.is_finite() && (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
        let mut out = ManualPrompts::default();
        for p in &self.points {
            if !inside(p.x, p.y) {
                return Err(ApiError::bad_request(format!("point ({}, {}) lies outside the {w}x{h} image", p.x, p.y)));
            }
            let (x, y) = pad.normalize_point(p.x, p.y);
            out.points.push(PointPrompt { x, y, label: p.label });
        }
        for b in &self.boxes {
            if !inside(b[0], b[1]) || !inside(b[2], b[3]) || b[0] >= b[2] || b[1] >= b[3] {
                return Err(ApiError::bad_request(format!(
                    "box {b:?} must satisfy 0 <= x1 < x2 <= {w} and 0 <= y1 < y2 <= {h}"
                )));
            }
            out.boxes.push(pad.normalize_box(*b));
        }
        if let Some(rle) = &self.brush_mask {
            out.brush_mask = Some(rle.decode().map_err(ApiError::bad_request)?);
        }
        Ok(out)
    }

    /// Normalizes and maps back, so callers can check the geometry.
    fn echo(&self, pad: &PadRecord) -> ApiResult<WirePrompts> {
        let m = self.to_model(pad)?;
        Ok(WirePrompts {
            points: m
                .points
                .iter()
                .map(|p| {
                    let (x, y) = pad.denormalize_point(p.x, p.y);
                    WirePoint { x, y, label: p.label }
                })
                .collect(),
            boxes: m.boxes.iter().map(|b| pad.denormalize_box(*b)).collect(),
            brush_mask: self.brush_mask.clone(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Geometry {
    pub input_size: usize,
    pub mask_prompt_size: usize,
    pub scale: f64,
    pub content_height: usize,
    pub content_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub mode: Mode,
    pub class_id: usize,
    pub height: usize,
    pub width: usize,
    pub object_present: bool,
    pub objectness_logit: f32,
    pub sparse_token_count: usize,
    pub mask: RleMask,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learned_box: Option<[f64; 4]>,
    pub prompts: WirePrompts,
    pub geometry: Geometry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub prompts: WirePrompts,
    pub object_present: bool,
    pub objectness_logit: f32,
    pub mask: RleMask,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub class_id: usize,
    pub height: usize,
    pub width: usize,
    pub accepted: bool,
    pub created_at: u64,
    pub history: Vec<HistoryEntry>,
    pub geometry: Geometry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    /// Base64 PNG, foreground 255.
    pub mask_png: String,
    pub metadata: Value,
}

struct Session {
    id: String,
    class_id: usize,
    pad: PadRecord,
    embedding: ImageEmbedding,
    created: Instant,
    created_at: u64,
    accepted: bool,
    cumulative: WirePrompts,
    history: Vec<HistoryEntry>,
    last_mask: BinaryMask,
}

pub struct AppState {
    model: Arc<PromptSegmenter>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    ttl: Duration,
    max_image_bytes: usize,
    max_image_side: usize,
}

impl AppState {
    pub fn new(model: PromptSegmenter, config: &ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: Arc::new(model),
            sessions: Mutex::new(HashMap::new()),
            ttl: Duration::from_secs(config.session_ttl_seconds),
            max_image_bytes: config.max_image_bytes,
            max_image_side: config.max_image_side,
        })
    }

    fn geometry(&self, pad: &PadRecord) -> Geometry {
        let g = self.model.geometry();
        let (content_height, content_width) = pad.content_size();
        Geometry {
            input_size: g.input_size,
            mask_prompt_size: g.mask_prompt_size,
            scale: pad.scale,
            content_height,
            content_width,
        }
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<tokio::sync::Mutex<Session>>>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn purge_expired(&self) {
        let ttl = self.ttl;
        self.sessions().retain(|_, s| s.try_lock().map_or(true, |s| s.created.elapsed() <= ttl));
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.purge_expired();
        self.sessions().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // base64 inflates by 4/3; leave room for the JSON around it
    let body_limit = state.max_image_bytes / 3 * 4 + (1 << 20);
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/predict", post(predict))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/refine", post(refine_session))
        .route("/sessions/{id}/accept", post(accept_session))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn parse_json(body: &Bytes) -> ApiResult<serde_json::Map<String, Value>> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad_request("request body must be a JSON object")),
        Err(e) => Err(ApiError::bad_request(format!("malformed JSON: {e}"))),
    }
}

fn field<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, name: &str) -> ApiResult<Option<T>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| ApiError::bad_request(format!("invalid `{name}`: {e}"))),
    }
}

fn reject_unknown(obj: &serde_json::Map<String, Value>, allowed: &[&str]) -> ApiResult<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ApiError::bad_request(format!("unknown field `{k}`"))),
        None => Ok(()),
    }
}

fn class_id(state: &AppState, obj: &serde_json::Map<String, Value>) -> ApiResult<usize> {
    let k = field::<usize>(obj, "class_id")?.unwrap_or(0);
    let n = state.model.ppn.config.num_classes;
    if k >= n {
        return Err(ApiError::bad_request(format!("class_id {k} out of range (model has {n} classes)")));
    }
    Ok(k)
}

struct Prepared {
    pad: PadRecord,
    embedding: ImageEmbedding,
}

async fn prepare_image(state: &Arc<AppState>, obj: &serde_json::Map<String, Value>) -> ApiResult<Prepared> {
    let encoded = field::<String>(obj, "image")?.ok_or_else(|| ApiError::bad_request("missing `image` (base64 PNG)"))?;
    if encoded.len() / 4 * 3 > state.max_image_bytes {
        return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "too-large", "image exceeds the upload limit"));
    }
    let bytes = BASE64
        .decode(encoded.trim())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "image", format!("image is not valid base64: {e}")))?;
    let st = state.clone();
    run_blocking(move || {
        let image = decode_image(&bytes)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "image", format!("cannot decode image: {e}")))?;
        if image.height.max(image.width) > st.max_image_side {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "too-large",
                format!("image is {}x{}, larger than {} px", image.height, image.width, st.max_image_side),
            ));
        }
        let sample = resize_pad(&Sample::new("upload", image, Vec::new()), st.model.geometry().input_size)?;
        let embedding = st.model.backbone.encode_image(&sample.image)?;
        Ok(Prepared { pad: sample.pad, embedding })
    })
    .await
}

async fn run_blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

struct Inference {
    result: SegmentationResult,
    learned_box: Option<[f64; 4]>,
    mask: BinaryMask,
}

/// Runs a mode on a prepared embedding; masks are gated by objectness in
/// `auto`/`semi` and mapped back to the original image size.
fn infer(
    model: &PromptSegmenter,
    embedding: &ImageEmbedding,
    pad: &PadRecord,
    class_id: usize,
    mode: Mode,
    manual: Option<&ManualPrompts>,
) -> ApiResult<Inference> {
    let (result, learned_box) = match mode {
        Mode::Manual => {
            let prompts = manual.ok_or_else(|| ApiError::bad_request("manual mode needs prompts"))?;
            prompts.validate(model.geometry())?;
            (model.segment_manual(embedding, prompts)?, None)
        }
        Mode::Auto | Mode::Semi => {
            let (r, b) = model.segment_embedding_learned(embedding, class_id, manual)?;
            (r, Some(pad.denormalize_box(b)))
        }
    };
    let model_mask = if mode == Mode::Manual { result.mask.clone() } else { result.gated_mask() };
    let mask = pad.mask_to_original(&model_mask);
    Ok(Inference {
        result,
        learned_box,
        mask,
    })
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<PredictResponse>> {
    let obj = parse_json(&body)?;
    reject_unknown(&obj, &["image", "class_id", "mode", "prompts"])?;
    let mode = field::<Mode>(&obj, "mode")?.ok_or_else(|| ApiError::bad_request("missing `mode` (auto, manual or semi)"))?;
    let wire = match mode {
        Mode::Auto => {
            if obj.contains_key("prompts") {
                return Err(ApiError::bad_request("auto mode does not accept prompts"));
            }
            WirePrompts::default()
        }
        Mode::Manual => {
            let p = field::<WirePrompts>(&obj, "prompts")?.unwrap_or_default();
            if p.is_empty() {
                return Err(ApiError::bad_request("manual mode needs at least one prompt"));
            }
            p
        }
        Mode::Semi => field::<WirePrompts>(&obj, "prompts")?.unwrap_or_default(),
    };
    let class_id = class_id(&state, &obj)?;
    let prepared = prepare_image(&state, &obj).await?;
    let manual = if wire.is_empty() { None } else { Some(wire.to_model(&prepared.pad)?) };
    let echo = wire.echo(&prepared.pad)?;
    let st = state.clone();
    let pad = prepared.pad;
    let inference = run_blocking(move || infer(&st.model, &prepared.embedding, &pad, class_id, mode, manual.as_ref())).await?;
    Ok(Json(PredictResponse {
        mode,
        class_id,
        height: pad.original_height,
        width: pad.original_width,
        object_present: inference.result.object_present,
        objectness_logit: inference.result.objectness_logit,
        sparse_token_count: inference.result.sparse_token_count,
        mask: RleMask::encode(&inference.mask),
        learned_box: inference.learned_box,
        prompts: echo,
        geometry: state.geometry(&pad),
    }))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn view(state: &AppState, s: &Session) -> SessionView {
    SessionView {
        session_id: s.id.clone(),
        class_id: s.class_id,
        height: s.pad.original_height,
        width: s.pad.original_width,
        accepted: s.accepted,
        created_at: s.created_at,
        history: s.history.clone(),
        geometry: state.geometry(&s.pad),
    }
}

/// Runs semi mode with the session's cumulative prompts and appends a step.
async fn run_step(state: &Arc<AppState>, session: &mut Session) -> ApiResult<()> {
    let manual = if session.cumulative.is_empty() {
        None
    } else {
        Some(session.cumulative.to_model(&session.pad)?)
    };
    let st = state.clone();
    let (embedding, pad, class_id) = (session.embedding.clone(), session.pad, session.class_id);
    let inference = run_blocking(move || infer(&st.model, &embedding, &pad, class_id, Mode::Semi, manual.as_ref())).await?;
    session.history.push(HistoryEntry {
        step: session.history.len() + 1,
        prompts: session.cumulative.clone(),
        object_present: inference.result.object_present,
        objectness_logit: inference.result.objectness_logit,
        mask: RleMask::encode(&inference.mask),
    });
    session.last_mask = inference.mask;
    Ok(())
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let obj = parse_json(&body)?;
    reject_unknown(&obj, &["image", "class_id"])?;
    let class_id = class_id(&state, &obj)?;
    let prepared = prepare_image(&state, &obj).await?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut session = Session {
        id: id.clone(),
        class_id,
        pad: prepared.pad,
        embedding: prepared.embedding,
        created: Instant::now(),
        created_at: now_unix(),
        accepted: false,
        cumulative: WirePrompts::default(),
        history: Vec::new(),
        last_mask: BinaryMask::zeros(prepared.pad.original_height, prepared.pad.original_width),
    };
    run_step(&state, &mut session).await?;
    let v = view(&state, &session);
    state.purge_expired();
    state.sessions().insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let session = state.session(&id)?;
    let s = session.lock().await;
    Ok(Json(view(&state, &s)))
}

async fn refine_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let session = state.session(&id)?;
    let obj = parse_json(&body)?;
    reject_unknown(&obj, &["prompts"])?;
    let prompts = field::<WirePrompts>(&obj, "prompts")?.unwrap_or_default();
    let mut s = session.lock().await;
    if s.accepted {
        return Err(ApiError::new(StatusCode::CONFLICT, "conflict", format!("session `{id}` was already accepted")));
    }
    if prompts.is_empty() {
        return Err(ApiError::bad_request("refine needs at least one prompt"));
    }
    prompts.to_model(&s.pad)?.validate(state.model.geometry())?;
    let previous = s.cumulative.clone();
    s.cumulative = previous.merged(&prompts);
    if let Err(e) = run_step(&state, &mut s).await {
        s.cumulative = previous;
        return Err(e);
    }
    Ok(Json(view(&state, &s)))
}

async fn accept_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<AcceptResponse>> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    if s.accepted {
        return Err(ApiError::new(StatusCode::CONFLICT, "conflict", format!("session `{id}` was already accepted")));
    }
    s.accepted = true;
    let png = encode_mask_png(&s.last_mask)?;
    let last = s.history.last();
    Ok(Json(AcceptResponse {
        session_id: s.id.clone(),
        height: s.last_mask.height,
        width: s.last_mask.width,
        mask_png: BASE64.encode(png),
        metadata: serde_json::json!({
            "class_id": s.class_id,
            "steps": s.history.len(),
            "object_present": last.map(|h| h.object_present),
            "objectness_logit": last.map(|h| h.objectness_logit),
            "prompts": s.cumulative,
            "created_at": s.created_at,
        }),
    }))
}
