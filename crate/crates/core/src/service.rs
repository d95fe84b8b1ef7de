//! HTTP inference service: image catalog, open-ended and multiple-choice
//! answers with attributions, and health.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{MapStore, VectorStore};
use crate::inference::{Engine, Explanation, MultipleChoice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub vectors: PathBuf,
    pub maps: Option<PathBuf>,
    /// Directory of `<image_id>.jpg` / `.png` thumbnails served under `/images`.
    pub static_dir: Option<PathBuf>,
    pub max_question_chars: usize,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: PathBuf::from("model.json"),
            vectors: PathBuf::from("features.ibf"),
            maps: None,
            static_dir: None,
            max_question_chars: 512,
            cors_origin: None,
        }
    }
}

/// A model and its stores, ready to answer.
#[derive(Debug)]
pub struct Loaded {
    pub engine: Engine,
    pub fingerprint: String,
}

/// Loads the checkpoint and stores named by `config`.
pub fn load(config: &ServiceConfig) -> Result<Loaded> {
    let ckpt = checkpoint::load_checked(&config.checkpoint, None, None)?;
    let vectors = VectorStore::open(&config.vectors)?;
    let maps = config.maps.as_deref().map(MapStore::open).transpose()?;
    Ok(Loaded {
        engine: Engine::new(ckpt.model, vectors, maps)?,
        fingerprint: ckpt.fingerprint,
    })
}

/// Shared, read-only request state. The model slot is filled once.
#[derive(Debug)]
pub struct AppState {
    loaded: OnceLock<Loaded>,
    max_question_chars: usize,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(max_question_chars: usize, static_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            loaded: OnceLock::new(),
            max_question_chars,
            static_dir,
        })
    }

    pub fn ready(loaded: Loaded, max_question_chars: usize) -> Arc<Self> {
        let state = Self::new(max_question_chars, None);
        state.install(loaded);
        state
    }

    /// Makes the model available; later calls are ignored.
    pub fn install(&self, loaded: Loaded) {
        let _ = self.loaded.set(loaded);
    }

    fn engine(&self) -> std::result::Result<&Loaded, ApiError> {
        self.loaded.get().ok_or(ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "loading",
            detail: "model is still loading".into(),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code,
            detail: detail.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::ImageNotFound(_) => (StatusCode::NOT_FOUND, "image_not_found"),
            Error::Argument(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            detail: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request("invalid_request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "detail": self.detail}))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AskRequest {
    pub image_id: u64,
    pub question: String,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct McRequest {
    pub image_id: u64,
    pub question: String,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub fingerprint: String,
    #[serde(rename = "A")]
    pub classes: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub d_v: usize,
}

fn check_question(state: &AppState, question: &str) -> std::result::Result<(), ApiError> {
    let n = question.chars().count();
    if n > state.max_question_chars {
        return Err(ApiError::bad_request(
            "question_too_long",
            format!("question has {n} characters, limit is {}", state.max_question_chars),
        ));
    }
    Ok(())
}

async fn images(State(state): State<Arc<AppState>>) -> ApiResult<Vec<ImageEntry>> {
    let loaded = state.engine()?;
    let entries = loaded
        .engine
        .vectors()
        .ids()
        .iter()
        .map(|&image_id| ImageEntry {
            image_id,
            thumbnail: state.static_dir.as_ref().and_then(|dir| {
                ["jpg", "jpeg", "png"]
                    .iter()
                    .map(|ext| format!("{image_id}.{ext}"))
                    .find(|name| dir.join(name).is_file())
                    .map(|name| format!("/images/{name}"))
            }),
        })
        .collect();
    Ok(Json(entries))
}

async fn ask(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<AskRequest>, JsonRejection>,
) -> ApiResult<Explanation> {
    let Json(req) = body?;
    let loaded = state.engine()?;
    check_question(&state, &req.question)?;
    let k = req.k.unwrap_or(3);
    if k == 0 {
        return Err(ApiError::bad_request("invalid_request", "k must be at least 1"));
    }
    Ok(Json(loaded.engine.explain(&req.question, req.image_id, k)?))
}

async fn mc(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<McRequest>, JsonRejection>,
) -> ApiResult<MultipleChoice> {
    let Json(req) = body?;
    let loaded = state.engine()?;
    check_question(&state, &req.question)?;
    if req.choices.is_empty() {
        return Err(ApiError::bad_request("empty_choices", "choices must not be empty"));
    }
    Ok(Json(loaded.engine.predict_multiple_choice(&req.question, req.image_id, &req.choices)?))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.loaded.get() {
        Some(l) => {
            let p = &l.engine.model().params;
            Json(Health {
                status: "ok".into(),
                fingerprint: l.fingerprint.clone(),
                classes: p.num_classes(),
                vocab_size: p.vocab_size(),
                d_v: p.image_dim(),
            })
            .into_response()
        }
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
    }
}

/// All routes over `state`, with CORS for `cors_origin` (any when `None`).
pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Result<Router> {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match cors_origin {
        Some(o) => cors.allow_origin(
            HeaderValue::from_str(o).map_err(|_| Error::Argument(format!("invalid CORS origin `{o}`")))?,
        ),
        None => cors.allow_origin(Any),
    };
    let mut app = Router::new()
        .route("/api/images", get(images))
        .route("/api/ask", post(ask))
        .route("/api/mc", post(mc))
        .route("/api/health", get(health));
    if let Some(dir) = &state.static_dir {
        app = app.nest_service("/images", ServeDir::new(dir));
    }
    Ok(app.layer(cors).with_state(state))
}

/// Binds, loads the model in the background, and serves until `shutdown`
/// resolves. Health reports 503 until loading finishes; a load failure
/// stops the server with that error.
pub async fn serve(
    config: ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|e| Error::Argument(format!("cannot bind {}: {e}", config.bind)))?;
    let state = AppState::new(config.max_question_chars, config.static_dir.clone());
    let app = router(state.clone(), config.cors_origin.as_deref())?;
    tracing::info!(addr = %config.bind, "listening");

    let (failed_tx, failed_rx) = tokio::sync::oneshot::channel::<Error>();
    let loader_state = state.clone();
    let loader_config = config.clone();
    tokio::task::spawn_blocking(move || match load(&loader_config) {
        Ok(loaded) => {
            tracing::info!(fingerprint = %loaded.fingerprint, "model loaded");
            loader_state.install(loaded);
        }
        Err(e) => {
            let _ = failed_tx.send(e);
        }
    });

    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = axum::serve(listener, app).with_graceful_shutdown(async move {
        tokio::select! {
            _ = shutdown => {}
            _ = stop_rx => {}
        }
    });
    let server = tokio::spawn(async move { server.await });
    let load_error = match failed_rx.await {
        Ok(e) => {
            let _ = stop_tx.send(());
            Some(e)
        }
        Err(_) => None,
    };
    server
        .await
        .map_err(|e| Error::Argument(format!("server task failed: {e}")))?
        .map_err(|e| Error::io(PathBuf::from(config.bind.to_string()), e))?;
    match load_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
