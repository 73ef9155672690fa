//! Local HTTP service for the annotate → propagate → review loop.
//!
//! | Method | Path | Body | Success |
//! |---|---|---|---|
//! | POST | `/sessions` | multipart, one PNG per part in frame order | 201 `{session_id, num_frames, height, width}` |
//! | PUT | `/sessions/{id}/annotations/{frame}` | single-channel binary PNG | 200 `{frame, annotated}` |
//! | POST | `/sessions/{id}/inpaint` | none | 202 `{status}` |
//! | GET | `/sessions/{id}/status` | none | 200 status JSON |
//! | GET | `/sessions/{id}/frames/{t}?kind=completed\|mask\|soft_mask\|input` | none | 200 PNG |
//!
//! Errors are JSON `{"error": "..."}` with 400 (bad input), 404 (unknown
//! session or frame), 409 (conflicting state) or 422 (nothing to run).

mod session;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use vinpaint::image::{Frame, Mask, SoftMask};
use vinpaint::synth::check_uniform_dims;

pub use session::{SharedModel, Status};
use session::{Session, Shared};

pub const MAX_FRAMES: usize = 256;
pub const MAX_SIDE: usize = 1024;
const MAX_BODY_BYTES: usize = 1 << 30;

/// Handle to the service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Opens (or creates) the working directory and starts the worker.
    pub fn open(work_dir: &Path, model: SharedModel) -> vinpaint::Result<Self> {
        Ok(Self(Shared::open(work_dir, model)?))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/annotations/{frame}", put(put_annotation))
        .route("/sessions/{id}/inpaint", post(run_inpaint))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/frames/{t}", get(get_frame))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
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

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn internal(e: vinpaint::Error) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn new_session_id() -> String {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    let mut h = Sha256::new();
    h.update(nanos.to_le_bytes());
    h.update(COUNTER.fetch_add(1, Ordering::Relaxed).to_le_bytes());
    h.update(std::process::id().to_le_bytes());
    hex(&h.finalize()[..8])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn lookup(state: &AppState, id: &str) -> ApiResult<session::SessionRef> {
    state
        .0
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
}

async fn create_session(
    State(state): State<AppState>,
    mut multipart: Multipart,
) -> ApiResult<impl IntoResponse> {
    let mut frames = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("multipart: {e}")))?
    {
        let index = frames.len();
        if index >= MAX_FRAMES {
            return Err(ApiError::bad_request(format!(
                "at most {MAX_FRAMES} frames per session"
            )));
        }
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("frame {index}: {e}")))?;
        let frame = Frame::from_png_bytes(&bytes)
            .map_err(|e| ApiError::bad_request(format!("frame {index}: {e}")))?;
        let (h, w) = frame.dims();
        if h > MAX_SIDE || w > MAX_SIDE {
            return Err(ApiError::bad_request(format!(
                "frame {index} is {h}×{w}, larger than {MAX_SIDE}×{MAX_SIDE}"
            )));
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(ApiError::bad_request("no frames uploaded"));
    }
    check_uniform_dims(&frames).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let (height, width) = frames[0].dims();
    let num_frames = frames.len();
    let id = new_session_id();
    let dir = state.0.session_root().join(&id);
    let session = tokio::task::spawn_blocking(move || Session::create(dir, id, frames))
        .await
        .expect("session creation does not panic")
        .map_err(ApiError::internal)?;
    let id = session.id.clone();
    state.0.insert(session);
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "session_id": id,
            "num_frames": num_frames,
            "height": height,
            "width": width,
        })),
    ))
}

/// PNG color type byte of the IHDR chunk; 0 is plain grayscale.
fn png_color_type(bytes: &[u8]) -> Option<u8> {
    const SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";
    (bytes.len() > 25 && bytes.starts_with(SIGNATURE) && &bytes[12..16] == b"IHDR")
        .then(|| bytes[25])
}

async fn put_annotation(
    State(state): State<AppState>,
    UrlPath((id, frame)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let session = lookup(&state, &id)?;
    let index: usize = frame
        .parse()
        .map_err(|_| ApiError::bad_request(format!("frame index `{frame}` is not a number")))?;
    if png_color_type(&body) != Some(0) {
        return Err(ApiError::bad_request(
            "mask must be a single-channel grayscale PNG",
        ));
    }
    let soft = SoftMask::from_png_bytes(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if soft.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ApiError::bad_request(
            "mask pixels must be 0 or 255",
        ));
    }
    let (h, w) = soft.dims();
    let mask = Mask::new(h, w, soft.data().to_vec()).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mut s = session.lock().unwrap();
    if s.status == Status::Running {
        return Err(ApiError::conflict("a propagation is running"));
    }
    if index >= s.frames.len() {
        return Err(ApiError::bad_request(format!(
            "frame {index} outside a clip of {} frames",
            s.frames.len()
        )));
    }
    if mask.dims() != s.dims() {
        return Err(ApiError::bad_request(format!(
            "mask is {:?}, frames are {:?}",
            mask.dims(),
            s.dims()
        )));
    }
    s.put_annotation(index, mask).map_err(ApiError::internal)?;
    Ok(Json(json!({
        "frame": index,
        "annotated": s.annotations.indices(),
    })))
}

async fn run_inpaint(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<impl IntoResponse> {
    let session = lookup(&state, &id)?;
    {
        let mut s = session.lock().unwrap();
        match s.status {
            Status::Running => return Err(ApiError::conflict("a propagation is already running")),
            Status::Error => {
                return Err(ApiError::conflict(format!(
                    "session failed earlier: {}",
                    s.error.clone().unwrap_or_default()
                )))
            }
            Status::Idle | Status::Done => {}
        }
        if s.annotations.is_empty() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "annotate at least one frame first",
            ));
        }
        s.status = Status::Running;
        s.progress = 0;
        s.progress_total = 0;
        s.persist().map_err(ApiError::internal)?;
    }
    state.0.enqueue(id);
    Ok((StatusCode::ACCEPTED, Json(json!({ "status": Status::Running }))))
}

async fn status(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<impl IntoResponse> {
    let session = lookup(&state, &id)?;
    let s = session.lock().unwrap();
    let (h, w) = s.dims();
    Ok(Json(json!({
        "session_id": s.id,
        "status": s.status,
        "num_frames": s.frames.len(),
        "height": h,
        "width": w,
        "annotated": s.annotations.indices(),
        "progress": { "done": s.progress, "total": s.progress_total },
        "provenance": s.result.as_ref().map(|r| r.provenance.clone()),
        "error": s.error,
    })))
}

#[derive(Deserialize)]
struct FrameQuery {
    kind: Option<String>,
}

async fn get_frame(
    State(state): State<AppState>,
    UrlPath((id, t)): UrlPath<(String, String)>,
    Query(q): Query<FrameQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let session = lookup(&state, &id)?;
    let kind = q.kind.as_deref().unwrap_or("completed");
    if !matches!(kind, "completed" | "mask" | "soft_mask" | "input") {
        return Err(ApiError::bad_request(format!(
            "unknown kind `{kind}`; expected completed, mask, soft_mask or input"
        )));
    }
    let (png, provenance) = {
        let s = session.lock().unwrap();
        let t: usize = t
            .parse()
            .ok()
            .filter(|&t| t < s.frames.len())
            .ok_or_else(|| ApiError::not_found(format!("no frame `{t}`")))?;
        if kind == "input" {
            (s.frames[t].to_png_bytes(), None)
        } else {
            let result = match (&s.result, s.status) {
                (Some(r), Status::Done) => r.clone(),
                _ => return Err(ApiError::conflict("no finished result for this session")),
            };
            let png = match kind {
                "completed" => result.completed[t].to_png_bytes(),
                "mask" => result.masks[t].to_png_bytes(),
                _ => result.soft_masks[t].to_png_bytes(),
            };
            (png, Some(result.provenance[t].as_str()))
        }
    };
    let png = png.map_err(ApiError::internal)?;
    let etag = format!("\"{}\"", hex(&Sha256::digest(&png)));
    let mut out = HeaderMap::new();
    out.insert(header::ETAG, HeaderValue::from_str(&etag).expect("hex is a valid header"));
    if let Some(p) = provenance {
        out.insert("x-provenance", HeaderValue::from_static(p));
    }
    if headers
        .get(header::IF_NONE_MATCH)
        .is_some_and(|v| v.as_bytes() == etag.as_bytes())
    {
        return Ok((StatusCode::NOT_MODIFIED, out).into_response());
    }
    out.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    Ok((StatusCode::OK, out, png).into_response())
}
