//! HTTP sessions over the engine, for the browser client.

mod rle;

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::set_header::SetResponseHeaderLayer;

use crate::dataio::{decode_image, decode_mask, png_dimensions};
use crate::engine::{iou, Engine, EngineConfig, Mode, Routing, Transcript, TranscriptEvent};
use crate::error::Error;
use crate::numerics::ParamVector;
use crate::segmenter::{Click, Mask, Sign, MAX_SIDE};

pub use rle::{rle_decode, rle_encode};

pub const API_VERSION: &str = "1";
pub const API_HEADER: &str = "dcseg-api";
pub const DEFAULT_BODY_LIMIT: usize = 4 * 1024 * 1024;

/// What every new session starts from.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model: Arc<ParamVector>,
    pub model_hash: String,
    pub mode: Mode,
    pub engine: EngineConfig,
    /// Where transcripts are written on delete and shutdown.
    pub transcript_dir: Option<PathBuf>,
    pub body_limit: usize,
}

impl ServiceConfig {
    pub fn new(model: Arc<ParamVector>, model_hash: String) -> Self {
        Self {
            model,
            model_hash,
            mode: Mode::DcTta,
            engine: EngineConfig::default(),
            transcript_dir: None,
            body_limit: DEFAULT_BODY_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub rle: Vec<[u64; 2]>,
}

impl RleMask {
    pub fn from_mask(mask: &Mask) -> Self {
        Self { width: mask.width(), height: mask.height(), rle: rle_encode(mask) }
    }

    pub fn decode(&self) -> crate::Result<Mask> {
        rle_decode(self.width, self.height, &self.rle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitView {
    pub id: usize,
    pub is_global: bool,
    pub n_positives: usize,
    /// `None` until the unit has produced a mask.
    pub mask_rle: Option<Vec<[u64; 2]>>,
    pub color_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub t: usize,
    pub mask: Option<RleMask>,
    pub units: Vec<UnitView>,
    pub iou_vs_gt: Option<f64>,
    pub routing: Option<Routing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub created_at: u64,
    #[serde(flatten)]
    pub state: MaskResponse,
    pub history: Vec<TranscriptEvent>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub image: String,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub gt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickRequest {
    pub x: i64,
    pub y: i64,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: String,
    pub version: String,
    pub api: String,
}

/// An error response: status plus `{"error": message}`.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Input(_) | Error::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(r.status(), r.body_text())
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no session {id:?}"))
}

struct Session {
    id: String,
    engine: Engine,
    gt: Option<Mask>,
    transcript: Transcript,
    created_at: u64,
    last_routing: Option<Routing>,
}

impl Session {
    fn state(&self) -> MaskResponse {
        let units = self
            .engine
            .units()
            .iter()
            .map(|u| UnitView {
                id: u.id,
                is_global: u.is_global(),
                n_positives: u.positives.len(),
                mask_rle: u.mask.as_ref().map(rle_encode),
                color_index: u.id,
            })
            .collect();
        let mask = self.engine.final_mask();
        let iou_vs_gt = match (mask, &self.gt) {
            (Some(m), Some(g)) => iou(m, g).ok(),
            _ => None,
        };
        MaskResponse {
            t: self.engine.iteration(),
            mask: mask.map(RleMask::from_mask),
            units,
            iou_vs_gt,
            routing: self.last_routing.clone(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            session_id: self.id.clone(),
            mode: self.engine.mode(),
            width: self.transcript.width,
            height: self.transcript.height,
            created_at: self.created_at,
            state: self.state(),
            history: self.transcript.events.clone(),
        }
    }

    fn click(&mut self, req: &ClickRequest) -> crate::Result<MaskResponse> {
        let (w, h) = (self.transcript.width as i64, self.transcript.height as i64);
        if !(0..w).contains(&req.x) || !(0..h).contains(&req.y) {
            return Err(Error::Input(format!("click ({}, {}) outside {w}x{h}", req.x, req.y)));
        }
        let outcome = self.engine.step(Click::new(req.x as u32, req.y as u32, req.sign, 0))?;
        self.transcript.events.push(TranscriptEvent::from_outcome(&outcome, self.gt.as_ref())?);
        self.last_routing = outcome.routing;
        Ok(self.state())
    }

    fn reset(&mut self) {
        self.engine.reset();
        self.transcript.events.clear();
        self.last_routing = None;
    }
}

type SessionMap = HashMap<String, Arc<tokio::sync::Mutex<Session>>>;

struct Inner {
    config: ServiceConfig,
    sessions: std::sync::Mutex<SessionMap>,
}

/// Shared service state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self { inner: Arc::new(Inner { config, sessions: std::sync::Mutex::new(HashMap::new()) }) }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions().len()
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, SessionMap> {
        self.inner.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn get(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions().get(id).cloned().ok_or_else(|| not_found(id))
    }

    fn persist(&self, session: &Session) -> std::io::Result<()> {
        let Some(dir) = &self.inner.config.transcript_dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&session.transcript)?;
        std::fs::write(dir.join(format!("{}.json", session.id)), text + "\n")
    }

    /// Writes the transcript of every open session.
    pub async fn flush_transcripts(&self) -> std::io::Result<usize> {
        let all: Vec<_> = self.sessions().values().cloned().collect();
        for s in &all {
            self.persist(&*s.lock().await)?;
        }
        Ok(all.len())
    }
}

fn decode_base64_png(field: &str, data: &str) -> Result<Vec<u8>, ApiError> {
    BASE64.decode(data.trim()).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("{field}: invalid base64: {e}")))
}

fn build_session(config: &ServiceConfig, req: CreateRequest) -> Result<Session, ApiError> {
    let bytes = decode_base64_png("image", &req.image)?;
    let (w, h) = png_dimensions(&bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("image: {e}")))?;
    if w > MAX_SIDE || h > MAX_SIDE {
        return Err(ApiError(StatusCode::PAYLOAD_TOO_LARGE, format!("image {w}x{h} exceeds {MAX_SIDE} per side")));
    }
    let image = decode_image(&bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("image: {e}")))?;
    let gt = match &req.gt {
        None => None,
        Some(data) => {
            let bytes = decode_base64_png("gt", data)?;
            let gt = decode_mask(&bytes).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("gt: {e}")))?;
            if !gt.same_shape(&Mask::empty(w, h)) {
                return Err(ApiError(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("gt is {}x{} but image is {w}x{h}", gt.width(), gt.height()),
                ));
            }
            Some(gt)
        }
    };
    let engine_cfg = match &req.config {
        Some(overrides) => config.engine.with_overrides(overrides)?,
        None => config.engine.clone(),
    };
    let mode = req.mode.unwrap_or(config.mode);
    let engine = Engine::new(Arc::new(image), Arc::clone(&config.model), mode, engine_cfg.clone())?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Ok(Session {
        id,
        engine,
        gt,
        transcript: Transcript::new(mode, engine_cfg, w, h, Some(config.model_hash.clone())),
        created_at,
        last_routing: None,
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let Json(req) = body?;
    let config = state.config().clone();
    let session = blocking(move || build_session(&config, req)).await??;
    let resp = CreateResponse {
        session_id: session.id.clone(),
        width: session.transcript.width,
        height: session.transcript.height,
    };
    log::info!("session {} created ({}x{}, {})", resp.session_id, resp.width, resp.height, session.engine.mode());
    state.sessions().insert(session.id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ClickRequest>, JsonRejection>,
) -> Result<Json<MaskResponse>, ApiError> {
    let session = state.get(&id)?;
    let Json(req) = body?;
    let mut guard = session
        .try_lock_owned()
        .map_err(|_| ApiError(StatusCode::CONFLICT, format!("session {id:?} is already adapting")))?;
    let resp = blocking(move || guard.click(&req)).await??;
    Ok(Json(resp))
}

async fn snapshot(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    let session = state.get(&id)?;
    let guard = session.lock().await;
    Ok(Json(guard.snapshot()))
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Transcript>, ApiError> {
    let session = state.get(&id)?;
    let guard = session.lock().await;
    Ok(Json(guard.transcript.clone()))
}

async fn reset(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    let session = state.get(&id)?;
    let mut guard = session
        .try_lock()
        .map_err(|_| ApiError(StatusCode::CONFLICT, format!("session {id:?} is already adapting")))?;
    guard.reset();
    Ok(Json(guard.snapshot()))
}

async fn delete(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let session = state.sessions().remove(&id).ok_or_else(|| not_found(&id))?;
    let guard = session.lock().await;
    state
        .persist(&guard)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("saving transcript: {e}")))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_hash: state.config().model_hash.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        api: API_VERSION.into(),
    })
}

pub fn router(state: AppState) -> Router {
    let limit = state.config().body_limit;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(snapshot).delete(delete))
        .route("/api/sessions/{id}/clicks", post(click))
        .route("/api/sessions/{id}/reset", post(reset))
        .route("/api/sessions/{id}/transcript", get(transcript))
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .layer(SetResponseHeaderLayer::overriding(
            HeaderName::from_static(API_HEADER),
            HeaderValue::from_static(API_VERSION),
        ))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then writes every open transcript.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    let n = state.flush_transcripts().await?;
    log::info!("shutdown: {n} transcripts flushed");
    Ok(())
}
