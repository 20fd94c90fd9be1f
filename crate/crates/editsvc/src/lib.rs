//! HTTP service for interactive editing of a trained panoptic scene.
//!
//! | method | path      | body / query                               | reply            |
//! |--------|-----------|--------------------------------------------|------------------|
//! | GET    | `/scene`  |                                            | scene summary    |
//! | POST   | `/edit`   | one edit op as JSON                        | summary + index  |
//! | POST   | `/undo`   |                                            | summary          |
//! | GET    | `/log`    |                                            | edit ops         |
//! | POST   | `/save`   | optional `{"dir": ...}`                    | `{"dir", "hash"}`|
//! | GET    | `/render` | `cam` or `az,el,dist`; `time,w,h,channel,format,refine` | image |
//!
//! Any other path is served from the static UI directory when configured.

mod image;
mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use panfield_core::edit::EditOp;
use panfield_core::Error as CoreError;
use serde::Deserialize;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

pub use image::{encode, palette, Channel, ImageFormat};
pub use session::{EditResponse, RenderParams, SceneSummary, ServiceConfig, Session, Snapshot, ThingSummary, View, EDIT_LOG_FILE};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Edit(CoreError),
    #[error("edit log is empty")]
    NothingToUndo,
    #[error("{0}")]
    Internal(CoreError),
    #[error("{0}")]
    Io(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Edit(CoreError::UnknownInstance(_)) => StatusCode::NOT_FOUND,
            Self::Edit(_) => StatusCode::BAD_REQUEST,
            Self::NothingToUndo => StatusCode::CONFLICT,
            Self::Internal(_) | Self::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

pub fn router(session: Arc<Session>) -> Router {
    let cors = match &session.config().cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    let static_dir = session.config().static_dir.clone();
    let api = Router::new()
        .route("/scene", get(scene))
        .route("/edit", post(edit))
        .route("/undo", post(undo))
        .route("/log", get(log))
        .route("/save", post(save))
        .route("/render", get(render))
        .with_state(session);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, session: Arc<Session>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session)).await
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))?
}

async fn scene(State(s): State<Arc<Session>>) -> Json<SceneSummary> {
    Json(s.summary())
}

async fn edit(State(s): State<Arc<Session>>, body: Bytes) -> Result<Json<EditResponse>, ServiceError> {
    let op: EditOp = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("malformed edit: {e}")))?;
    blocking(move || s.edit(op)).await.map(Json)
}

async fn undo(State(s): State<Arc<Session>>) -> Result<Json<SceneSummary>, ServiceError> {
    blocking(move || s.undo()).await.map(Json)
}

async fn log(State(s): State<Arc<Session>>) -> Json<Vec<EditOp>> {
    Json(s.log())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SaveRequest {
    dir: Option<PathBuf>,
}

async fn save(State(s): State<Arc<Session>>, body: Bytes) -> Result<Json<serde_json::Value>, ServiceError> {
    let req: SaveRequest = if body.iter().all(u8::is_ascii_whitespace) {
        SaveRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("malformed save request: {e}")))?
    };
    let hash = s.snapshot().hash.clone();
    let dir = blocking(move || s.save(req.dir.as_deref())).await?;
    Ok(Json(serde_json::json!({ "dir": dir, "hash": hash })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderQuery {
    cam: Option<usize>,
    az: Option<f64>,
    el: Option<f64>,
    dist: Option<f64>,
    time: Option<f64>,
    w: Option<usize>,
    h: Option<usize>,
    channel: Option<String>,
    format: Option<String>,
    refine: Option<bool>,
}

impl RenderQuery {
    fn params(self) -> Result<RenderParams, ServiceError> {
        let bad = ServiceError::BadRequest;
        let view = match (self.cam, self.az, self.el, self.dist) {
            (Some(i), None, None, None) => View::Camera(i),
            (None, Some(az), el, Some(dist)) => View::Orbit {
                azimuth_deg: az,
                elevation_deg: el.unwrap_or(20.0),
                distance: dist,
            },
            _ => return Err(bad("give either cam or az, dist (and optional el)".into())),
        };
        Ok(RenderParams {
            view,
            time: self.time,
            width: self.w.unwrap_or(160),
            height: self.h.unwrap_or(120),
            channel: self.channel.as_deref().unwrap_or("color").parse().map_err(bad)?,
            format: self.format.as_deref().unwrap_or("png").parse().map_err(bad)?,
            refine: self.refine.unwrap_or(false),
        })
    }
}

async fn render(
    State(s): State<Arc<Session>>,
    query: Result<Query<RenderQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(query) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let params = query.params()?;
    let format = params.format;
    let bytes = blocking(move || s.render(&params)).await?;
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes.as_ref().clone()).into_response())
}
