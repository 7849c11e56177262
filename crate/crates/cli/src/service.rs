//! HTTP interface for interactive posing.
//!
//! A session holds a latent code and its decoded pose. Drags on one session
//! run one at a time in arrival order; a drag that fails leaves the session
//! as it was. Rendered PNGs are cached by latent hash and size, so repeated
//! requests for the same pose return identical bytes.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use npuppet_core::apps::{constrained_deform, inbetween, DragSession, Endpoint, InbetweenRequest};
use npuppet_core::energies::{Constraint, LossWeights};
use npuppet_core::model::{sha256_hex, DeformModel, Latent};
use npuppet_core::puppet::locate_point;
use npuppet_core::render::{render, RasterConfig};
use npuppet_core::{DeformState, Error, Image, Point2, Puppet};

/// Largest render the service will produce, per side.
pub const MAX_RENDER_SIDE: usize = 4096;
const CACHE_LIMIT: usize = 1024;

pub struct Session {
    pub latent: Latent,
    pub state: DeformState,
}

/// Everything the handlers share. The puppet and model never change.
pub struct AppState {
    puppet: Arc<Puppet>,
    model: Arc<DeformModel>,
    raster: RasterConfig,
    weights: LossWeights,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    next_id: AtomicU64,
    pngs: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

impl AppState {
    pub fn new(puppet: Puppet, model: DeformModel, raster: RasterConfig, weights: LossWeights) -> Self {
        AppState {
            puppet: Arc::new(puppet),
            model: Arc::new(model),
            raster,
            weights,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            pngs: Mutex::new(HashMap::new()),
        }
    }

    /// A copy of the session's latent and pose, if it exists.
    pub async fn snapshot(&self, id: &str) -> Option<(Latent, DeformState)> {
        let s = self.session(id).ok()?;
        let s = s.lock().await;
        Some((s.latent.clone(), s.state.clone()))
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))
    }

    /// Key of a render of `z` at `w`×`h`.
    fn cache_key(z: &Latent, w: usize, h: usize) -> String {
        let bytes: Vec<u8> = z.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
        format!("{}-{w}x{h}", &sha256_hex(&bytes)[..24])
    }

    fn cached(&self, key: &str) -> Option<Arc<Vec<u8>>> {
        self.pngs.lock().expect("render cache").get(key).cloned()
    }

    fn store(&self, key: String, png: Vec<u8>) -> Arc<Vec<u8>> {
        let mut cache = self.pngs.lock().expect("render cache");
        if cache.len() >= CACHE_LIMIT && !cache.contains_key(&key) {
            cache.clear();
        }
        cache.entry(key).or_insert_with(|| Arc::new(png)).clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
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
        let status = if e.is_numeric() {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            StatusCode::BAD_REQUEST
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body; errors name the offending field.
fn body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ApiError::bad_request(format!("invalid body: {}", e.inner()))
        } else {
            ApiError::bad_request(format!("invalid body at `{path}`: {}", e.inner()))
        }
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))),
    }
}

fn png_response(png: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    /// Base64 PNG at the model's resolution.
    image: Option<String>,
    latent: Option<Latent>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionReply {
    pub session_id: String,
    pub latent: Latent,
    pub vertices: Vec<Point2>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DragPoint {
    point: Point2,
    target: Point2,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DragRequest {
    constraints: Vec<DragPoint>,
    iterations: Option<usize>,
    eta: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DragReply {
    pub latent: Latent,
    pub vertices: Vec<Point2>,
    pub l_user_before: f64,
    pub l_user_after: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolateRequest {
    z1: Latent,
    z2: Latent,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateReply {
    pub frames: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RenderQuery {
    w: Option<usize>,
    h: Option<usize>,
}

async fn create_session(State(app): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<SessionReply>> {
    let req: NewSession = body(&bytes)?;
    let latent = match (req.image, req.latent) {
        (Some(b64), None) => {
            let png = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(format!("invalid body at `image`: {e}")))?;
            let img = Image::decode_png(&png).map_err(|e| ApiError::bad_request(format!("invalid body at `image`: {e}")))?;
            let model = app.model.clone();
            blocking(move || model.encode(&img)).await?
        }
        (None, Some(z)) => z,
        _ => return Err(ApiError::bad_request("invalid body: give exactly one of `image` and `latent`")),
    };
    let state = app.model.decode(&latent, &app.puppet)?;
    let id = app.next_id.fetch_add(1, Ordering::Relaxed).to_string();
    let reply = SessionReply {
        session_id: id.clone(),
        latent: latent.clone(),
        vertices: state.vertices.clone(),
    };
    app.sessions
        .lock()
        .expect("session table")
        .insert(id, Arc::new(tokio::sync::Mutex::new(Session { latent, state })));
    Ok(Json(reply))
}

fn render_size(app: &AppState, q: &RenderQuery) -> ApiResult<(usize, usize)> {
    let (w, h) = (q.w.unwrap_or(app.raster.width), q.h.unwrap_or(app.raster.height));
    if !(8..=MAX_RENDER_SIDE).contains(&w) || !(8..=MAX_RENDER_SIDE).contains(&h) {
        return Err(ApiError::bad_request(format!("render size must be within 8..={MAX_RENDER_SIDE}, got {w}x{h}")));
    }
    Ok((w, h))
}

async fn render_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RenderQuery>,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    let (w, h) = render_size(&app, &q)?;
    let (latent, state) = {
        let s = session.lock().await;
        (s.latent.clone(), s.state.clone())
    };
    let key = AppState::cache_key(&latent, w, h);
    if let Some(png) = app.cached(&key) {
        return Ok(png_response(png));
    }
    let cfg = RasterConfig {
        width: w,
        height: h,
        ..app.raster.clone()
    };
    let puppet = app.puppet.clone();
    let png = blocking(move || Ok(render(&state, &puppet, &cfg)?.rgba.encode_png()?)).await?;
    Ok(png_response(app.store(key, png)))
}

async fn drag(State(app): State<Arc<AppState>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult<Json<DragReply>> {
    let session = app.session(&id)?;
    let req: DragRequest = body(&bytes)?;
    let mut s = session.lock().await;
    let mut constraints = Vec::with_capacity(req.constraints.len());
    for (i, c) in req.constraints.iter().enumerate() {
        let point = locate_point(&app.puppet, &s.state, c.point)
            .map_err(|e| ApiError::bad_request(format!("invalid body at `constraints[{i}].point`: {e}")))?;
        constraints.push(Constraint {
            point,
            target: c.target,
        });
    }
    let mut drag = DragSession::new(s.latent.clone(), constraints);
    drag.weights = app.weights;
    if let Some(n) = req.iterations {
        drag.iterations = n;
    }
    if let Some(eta) = req.eta {
        drag.eta = eta;
    }
    drag.validate(&app.puppet)?;
    let (model, puppet, cfg) = (app.model.clone(), app.puppet.clone(), app.raster.clone());
    let res = blocking(move || constrained_deform(&drag, &model, &puppet, &cfg))
        .await
        .map_err(|e| ApiError {
            message: format!("{}; the session keeps its previous pose", e.message),
            ..e
        })?;
    s.latent = res.latent.clone();
    s.state = res.state.clone();
    Ok(Json(DragReply {
        latent: res.latent,
        vertices: res.state.vertices,
        l_user_before: res.l_user_before,
        l_user_after: res.l_user_after,
    }))
}

async fn interpolate(State(app): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<InterpolateReply>> {
    let req: InterpolateRequest = body(&bytes)?;
    let (model, puppet, cfg) = (app.model.clone(), app.puppet.clone(), app.raster.clone());
    let frames = blocking(move || {
        let r = InbetweenRequest {
            a: Endpoint::Latent(req.z1),
            b: Endpoint::Latent(req.z2),
            n: req.n,
        };
        inbetween(&r, &model, &puppet, &cfg)?
            .into_iter()
            .map(|f| Ok((AppState::cache_key(&f.latent, cfg.width, cfg.height), f.image.encode_png()?)))
            .collect::<Result<Vec<_>, Error>>()
    })
    .await?;
    let urls = frames
        .into_iter()
        .map(|(key, png)| {
            let url = format!("/frames/{key}");
            app.store(key, png);
            url
        })
        .collect();
    Ok(Json(InterpolateReply { frames: urls }))
}

async fn frame(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    app.cached(&id)
        .map(png_response)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no frame `{id}`")))
}

async fn puppet(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(app.puppet.to_json("/puppet/texture.png"))
}

async fn texture(State(app): State<Arc<AppState>>) -> ApiResult<Response> {
    let png = app.puppet.texture.encode_png().map_err(Error::from)?;
    Ok(png_response(Arc::new(png)))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/render", get(render_session))
        .route("/session/{id}/drag", post(drag))
        .route("/interpolate", post(interpolate))
        .route("/frames/{id}", get(frame))
        .route("/puppet", get(puppet))
        .route("/puppet/texture.png", get(texture))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
