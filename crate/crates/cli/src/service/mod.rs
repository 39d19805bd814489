//! HTTP service: scene loading, renders, object selection, token grids and
//! chat routing.
//!
//! | route | body / query | reply |
//! |---|---|---|
//! | `POST /scene/load` | `{checkpoint?, scene?, codebook?, captions?}` | scene summary |
//! | `GET /views` | | cameras, object count, token shape |
//! | `GET /render` | `cam`, `channel` (`rgb`, `feat_v_pca`, `mask`, `alpha`) | PNG |
//! | `POST /select` | `{cam, x, y}` | `{object_id, mask_png}` (base64 PNG or null) |
//! | `POST /tokens` | `{level, cams, object_id?}` | token stats and a `handle` |
//! | `GET /tokens/{handle}` | | CSTF token blob |
//! | `POST /chat` | `{level, cams, object_id?, question, backend}` | `{answer, tokens_used, backend}` |
//! | `GET /healthz` | | `{status, loaded}` |
//!
//! Errors are `{"error": message}` with status 400 (malformed request),
//! 404 (unknown camera, object or handle), 409 (no scene loaded, or the
//! scene lacks what the request needs) or 502 (chat endpoint failure).

pub mod proxy;

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use convsplat_core::chat::{mock_chat, tokens_to_container, Codebook};
use convsplat_core::encoder::{Level, TokenGrid};
use convsplat_core::masking::{select_object, Selection};
use convsplat_core::scene::{import_sidecar, Checkpoint};
use convsplat_core::{Error, Session, TrainConfig};

use crate::images::{render_png, ImageChannel};
use crate::manifest::sha256_hex;

const MAX_HANDLES: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub llm_url: Option<String>,
    pub llm_timeout: Duration,
    /// Used when a scene is loaded without training state.
    pub base_config: TrainConfig,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            llm_url: None,
            llm_timeout: proxy::DEFAULT_TIMEOUT,
            base_config: TrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct LoadRequest {
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub captions: Option<PathBuf>,
}

/// A loaded scene with masks and PCA basis prepared, read-only afterwards.
pub struct Loaded {
    pub session: Session,
    pub codebook: Option<Codebook>,
    pub has_masks: bool,
}

impl Loaded {
    pub fn new(mut session: Session, codebook: Option<Codebook>) -> Self {
        let has_masks = session.prepare_masks().is_ok();
        session.pca();
        Self {
            session,
            codebook,
            has_masks,
        }
    }

    pub fn from_request(req: &LoadRequest, base: &TrainConfig) -> Result<Self, ApiError> {
        let session = match (&req.checkpoint, &req.scene) {
            (Some(_), Some(_)) => return Err(ApiError::bad("give either checkpoint or scene, not both")),
            (None, None) => return Err(ApiError::bad("checkpoint or scene path required")),
            (Some(p), None) | (None, Some(p)) => {
                let mut ckpt = import_sidecar(p).map_err(|e| ApiError::bad(format!("{}: {e}", p.display())))?;
                if req.scene.is_some() {
                    ckpt.training = None;
                }
                checkpoint_session(ckpt, base)
            }
        }
        .map_err(|e| ApiError::bad(e.to_string()))?;
        let codebook = match (&req.codebook, &req.captions) {
            (Some(v), Some(c)) => Some(Codebook::load(v, c).map_err(|e| ApiError::bad(format!("codebook: {e}")))?),
            (None, None) => None,
            _ => return Err(ApiError::bad("codebook and captions must be given together")),
        };
        if let Some(cb) = &codebook {
            if cb.dim != session.token_shape().1 {
                return Err(ApiError::bad(format!(
                    "codebook dimension {} does not match token dimension {}",
                    cb.dim,
                    session.token_shape().1
                )));
            }
        }
        Ok(Self::new(session, codebook))
    }

    fn summary(&self) -> serde_json::Value {
        let s = &self.session;
        let (t, d) = s.token_shape();
        json!({
            "cameras": s.scene.cameras.iter().enumerate().map(|(i, c)| json!({
                "id": i, "width": c.width, "height": c.height
            })).collect::<Vec<_>>(),
            "objects": s.scene.object_count,
            "gaussians": s.scene.gaussians.len(),
            "tokens_per_view": t,
            "token_dim": d,
            "scene_token_cap": s.config().scene_token_cap,
            "has_masks": self.has_masks,
            "has_codebook": self.codebook.is_some(),
        })
    }
}

pub struct AppState {
    loaded: RwLock<Option<Arc<Loaded>>>,
    handles: Mutex<(HashMap<String, Arc<TokenGrid>>, VecDeque<String>)>,
    options: ServiceOptions,
    client: reqwest::Client,
}

impl AppState {
    pub fn new(options: ServiceOptions, loaded: Option<Loaded>) -> Arc<Self> {
        Arc::new(Self {
            loaded: RwLock::new(loaded.map(Arc::new)),
            handles: Mutex::new((HashMap::new(), VecDeque::new())),
            options,
            client: reqwest::Client::new(),
        })
    }

    fn current(&self) -> Result<Arc<Loaded>, ApiError> {
        self.loaded
            .read()
            .unwrap()
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no scene loaded"))
    }

    fn store(&self, grid: TokenGrid) -> String {
        let handle = sha256_hex(&tokens_to_container(&grid).to_bytes())[..16].to_string();
        let mut guard = self.handles.lock().unwrap();
        let (map, order) = &mut *guard;
        if map.insert(handle.clone(), Arc::new(grid)).is_none() {
            order.push_back(handle.clone());
            while order.len() > MAX_HANDLES {
                let old = order.pop_front().unwrap();
                map.remove(&old);
            }
        }
        handle
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Arg(_) | Error::Bounds { .. } | Error::Config(_) | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::State(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed request: {e}")))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn check_cam(loaded: &Loaded, cam: usize) -> ApiResult<()> {
    let n = loaded.session.scene.cameras.len();
    if cam >= n {
        return Err(ApiError::not_found(format!("unknown camera {cam} ({n} cameras)")));
    }
    Ok(())
}

fn check_object(loaded: &Loaded, m: usize) -> ApiResult<()> {
    let n = loaded.session.scene.object_count;
    if m >= n {
        return Err(ApiError::not_found(format!("unknown object {m} ({n} objects)")));
    }
    Ok(())
}

async fn healthz(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let loaded = st.loaded.read().unwrap().is_some();
    Json(json!({ "status": "ok", "loaded": loaded }))
}

async fn load_scene(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: LoadRequest = parse_body(&body)?;
    let base = st.options.base_config.clone();
    let loaded = blocking(move || Loaded::from_request(&req, &base)).await?;
    let summary = loaded.summary();
    *st.loaded.write().unwrap() = Some(Arc::new(loaded));
    st.handles.lock().unwrap().0.clear();
    st.handles.lock().unwrap().1.clear();
    log::info!("scene loaded: {summary}");
    Ok(Json(summary))
}

async fn views(State(st): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(st.current()?.summary()))
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    cam: usize,
    channel: String,
}

async fn render(
    State(st): State<Arc<AppState>>,
    query: Result<Query<RenderQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::bad(e.body_text()))?;
    let loaded = st.current()?;
    let channel = ImageChannel::parse(&q.channel).ok_or_else(|| {
        ApiError::bad(format!("unknown channel {:?} (rgb, feat_v_pca, mask, alpha)", q.channel))
    })?;
    check_cam(&loaded, q.cam)?;
    if channel == ImageChannel::Mask && !loaded.has_masks {
        return Err(ApiError::new(StatusCode::CONFLICT, "scene has no masks"));
    }
    let png = blocking(move || Ok(render_png(&loaded.session, q.cam, channel)?)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
struct SelectRequest {
    cam: usize,
    x: i64,
    y: i64,
}

async fn select(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: SelectRequest = parse_body(&body)?;
    let loaded = st.current()?;
    check_cam(&loaded, req.cam)?;
    let masks = loaded
        .session
        .cached_masks(req.cam)
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "scene has no masks"))?;
    let sel = select_object(masks, req.x, req.y)?;
    let (object_id, mask_png) = match sel {
        Selection::Background => (None, None),
        Selection::Object(m) => {
            let mask = masks.object_mask(m);
            let png = convsplat_core::viz::gray_png(mask.width, mask.height, mask.to_gray())?;
            (Some(m), Some(base64::engine::general_purpose::STANDARD.encode(png)))
        }
    };
    Ok(Json(json!({ "object_id": object_id, "mask_png": mask_png })))
}

#[derive(Debug, Clone, Deserialize)]
struct TokenRequest {
    level: String,
    #[serde(default)]
    cams: Vec<usize>,
    object_id: Option<usize>,
}

/// Token grid for a request, checked against the scene token cap.
fn request_tokens(loaded: &Loaded, req: &TokenRequest) -> ApiResult<TokenGrid> {
    let level = Level::parse(&req.level)
        .ok_or_else(|| ApiError::bad(format!("unknown level {:?} (view, object, scene)", req.level)))?;
    if req.cams.is_empty() {
        return Err(ApiError::bad("at least one camera id required"));
    }
    for &c in &req.cams {
        check_cam(loaded, c)?;
    }
    let s = &loaded.session;
    let grid = match level {
        Level::View | Level::Object if req.cams.len() != 1 => {
            return Err(ApiError::bad(format!("{} level takes exactly one camera", level.name())))
        }
        Level::View => s.view_tokens(req.cams[0])?,
        Level::Object => {
            let m = req
                .object_id
                .ok_or_else(|| ApiError::bad("object level needs an object_id"))?;
            check_object(loaded, m)?;
            if !loaded.has_masks {
                return Err(ApiError::new(StatusCode::CONFLICT, "scene has no masks"));
            }
            s.object_tokens(req.cams[0], m)?
        }
        Level::Scene => {
            let mut seen = req.cams.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != req.cams.len() {
                return Err(ApiError::bad("camera ids must be distinct"));
            }
            s.scene_tokens(&req.cams)?
        }
    };
    let cap = s.config().scene_token_cap;
    if grid.count > cap {
        return Err(ApiError::bad(format!("{} tokens exceed the cap of {cap}", grid.count)));
    }
    Ok(grid)
}

#[derive(Debug, Serialize)]
struct TokenReply {
    handle: String,
    level: &'static str,
    count: usize,
    dim: usize,
    grid: [usize; 2],
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
}

async fn tokens(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<TokenReply>> {
    let req: TokenRequest = parse_body(&body)?;
    let loaded = st.current()?;
    let grid = blocking(move || request_tokens(&loaded, &req)).await?;
    let n = grid.data.len().max(1) as f64;
    let mean = grid.data.iter().sum::<f64>() / n;
    let var = grid.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let reply = TokenReply {
        handle: String::new(),
        level: grid.level.name(),
        count: grid.count,
        dim: grid.dim,
        grid: [grid.grid.0, grid.grid.1],
        mean,
        std: var.sqrt(),
        min: grid.data.iter().copied().fold(f64::INFINITY, f64::min),
        max: grid.data.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let handle = st.store(grid);
    Ok(Json(TokenReply { handle, ..reply }))
}

async fn token_blob(State(st): State<Arc<AppState>>, Path(handle): Path<String>) -> ApiResult<Response> {
    let grid = st
        .handles
        .lock()
        .unwrap()
        .0
        .get(&handle)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown token handle {handle}")))?;
    let bytes = tokens_to_container(&grid).to_bytes();
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct ChatRequest {
    level: String,
    #[serde(default)]
    cams: Vec<usize>,
    object_id: Option<usize>,
    question: String,
    #[serde(default = "default_backend")]
    backend: String,
}

fn default_backend() -> String {
    "mock".into()
}

async fn chat(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: ChatRequest = parse_body(&body)?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad("question is empty"));
    }
    if req.backend != "mock" && req.backend != "proxy" {
        return Err(ApiError::bad(format!("unknown backend {:?} (mock, proxy)", req.backend)));
    }
    let loaded = st.current()?;
    let treq = TokenRequest {
        level: req.level.clone(),
        cams: req.cams.clone(),
        object_id: req.object_id,
    };
    let worker = loaded.clone();
    let grid = blocking(move || request_tokens(&worker, &treq)).await?;
    let answer = if req.backend == "mock" {
        let cb = loaded
            .codebook
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "mock backend needs a codebook"))?;
        mock_chat(&grid, &req.question, cb)?.text
    } else {
        let url = st
            .options
            .llm_url
            .as_deref()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no chat endpoint configured"))?;
        proxy::proxy_chat(&st.client, url, st.options.llm_timeout, &grid, &req.question)
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e))?
    };
    Ok(Json(json!({
        "answer": answer,
        "tokens_used": grid.count,
        "backend": req.backend,
        "level": grid.level.name(),
    })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/scene/load", post(load_scene))
        .route("/views", get(views))
        .route("/render", get(render))
        .route("/select", post(select))
        .route("/tokens", post(tokens))
        .route("/tokens/{handle}", get(token_blob))
        .route("/chat", post(chat))
        .with_state(state)
}

/// Binds `addr` and serves in a background task. Returns the bound
/// address, useful with port 0.
pub async fn spawn(state: Arc<AppState>, addr: &str) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}

/// Loads the startup scene, if any, from checkpoint or scene paths.
pub fn startup_state(options: ServiceOptions, load: LoadRequest) -> anyhow::Result<Arc<AppState>> {
    let loaded = if load.checkpoint.is_some() || load.scene.is_some() {
        let l = Loaded::from_request(&load, &options.base_config).map_err(|e| anyhow::anyhow!(e.message))?;
        log::info!("scene loaded: {}", l.summary());
        Some(l)
    } else {
        None
    };
    Ok(AppState::new(options, loaded))
}

pub fn checkpoint_session(ckpt: Checkpoint, base: &TrainConfig) -> convsplat_core::Result<Session> {
    match ckpt.training {
        Some(_) => ckpt.into_session(),
        None => Session::new(ckpt.scene, base.clone()),
    }
}
