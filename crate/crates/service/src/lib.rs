//! HTTP service for running a psychophysics session against a generated stimulus pool.
//!
//! Routes:
//! - `GET /session/{id}`: the trial schedule with opaque stimulus tokens and the two button labels
//! - `GET /stimulus/{token}.png`: image bytes exactly as stored on disk
//! - `POST /response`: records one button press; acknowledged only after the line is on disk
//!
//! Responses are appended to `<sessions>/responses/<session_id>.jsonl` in the format
//! read by [`advtransfer::analysis::load_responses`].

mod state;

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub use state::{stimulus_token, AppState, ClientSession, ClientTrial, Stored};

pub const DATA_DIR_ENV: &str = "ADVT_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] advtransfer::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("session `{session}` references unknown stimulus `{stimulus}`")]
    MissingStimulus { session: String, stimulus: String },

    #[error("duplicate session id `{0}`")]
    DuplicateSession(String),

    #[error("corrupt response log {path} line {line}: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
}

impl ServiceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Body of `POST /response`. Class and condition fields are filled in server side.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponsePost {
    pub session_id: String,
    pub subject_id: String,
    pub trial_index: usize,
    /// Button label pressed, or `null` when the response window expired.
    pub chosen: Option<String>,
    /// Milliseconds from image onset.
    pub rt_ms: Option<f64>,
    /// Token the client displayed; checked against the schedule when present.
    #[serde(default)]
    pub stimulus: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub trial_index: usize,
    /// False when an earlier response for this subject and trial was already counted.
    pub counted: bool,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session/{id}", get(get_session))
        .route("/stimulus/{file}", get(get_stimulus))
        .route("/response", post(post_response))
        .layer(axum::middleware::map_response(allow_any_origin))
        .with_state(state)
}

async fn allow_any_origin(mut res: Response) -> Response {
    res.headers_mut()
        .insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    res
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.client_session(&id) {
        Some(s) => Json(s).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown session `{id}`")),
    }
}

async fn get_stimulus(State(state): State<Arc<AppState>>, Path(file): Path<String>) -> Response {
    let Some(token) = file.strip_suffix(".png") else {
        return error(StatusCode::NOT_FOUND, "stimuli are served as <token>.png");
    };
    let Some(path) = state.stimulus_path(token) else {
        return error(StatusCode::NOT_FOUND, format!("unknown stimulus `{token}`"));
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => {
            log::error!("reading {}: {e}", path.display());
            error(StatusCode::INTERNAL_SERVER_ERROR, "stimulus file unreadable")
        }
    }
}

async fn post_response(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let post: ResponsePost = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed response: {e}")),
    };
    let state2 = state.clone();
    let outcome = tokio::task::spawn_blocking(move || state2.record(&post)).await;
    match outcome {
        Ok(Ok(ack)) => Json(ack).into_response(),
        Ok(Err(Stored::Rejected(msg))) => error(StatusCode::BAD_REQUEST, msg),
        Ok(Err(Stored::Conflict(msg))) => error(StatusCode::CONFLICT, msg),
        Ok(Err(Stored::Failed(e))) => {
            log::error!("response not stored: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "response not stored")
        }
        Err(e) => {
            log::error!("response task failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "response not stored")
        }
    }
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let app = router(Arc::new(state));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
