//! HTTP front end over one loaded bank.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hiermem::retrieval::make_anchors;
use hiermem::{
    bank_stats, retrieve, EmbeddingMatrix, Error, ErrorClass, MemoryBank, RetrievalConfig,
};
use serde::Deserialize;
use serde_json::{json, Value};

pub const RETRIEVE_SCHEMA: &str = "hiermem.retrieve/1";

/// Shared read-only state: the bank plus the retrieval defaults that request
/// overrides are applied on top of.
pub struct AppState {
    pub bank: MemoryBank,
    pub defaults: RetrievalConfig,
    pub renormalize_anchors: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    anchors: Option<Vec<Vec<f32>>>,
    frames: Option<Vec<Vec<f32>>>,
    w: Option<usize>,
    #[serde(default)]
    config: Option<serde_json::Map<String, Value>>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/stats", get(stats))
        .route("/retrieve", post(retrieve_handler))
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "provenance": s.bank.provenance() }))
}

async fn stats(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(bank_stats(&s.bank)))
}

/// A rejected request: status plus a message safe to show the client.
type Reject = (StatusCode, String);

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let body = json!({ "error": { "status": status.as_u16(), "message": message.into() } });
    (status, Json(body)).into_response()
}

fn reject(r: Reject) -> Response {
    error(r.0, r.1)
}

fn matrix(rows: &[Vec<f32>], what: &str) -> Result<EmbeddingMatrix, Reject> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || dim == 0 {
        return Err((
            StatusCode::BAD_REQUEST,
            format!("{what} must be a non-empty list of vectors"),
        ));
    }
    EmbeddingMatrix::from_rows(dim, rows).map_err(|_| {
        (
            StatusCode::BAD_REQUEST,
            format!("{what} rows differ in length"),
        )
    })
}

fn effective_config(
    defaults: &RetrievalConfig,
    overrides: Option<serde_json::Map<String, Value>>,
) -> Result<RetrievalConfig, Reject> {
    let Some(overrides) = overrides else {
        return Ok(defaults.clone());
    };
    let mut base = serde_json::to_value(defaults).expect("retrieval config serializes");
    let obj = base.as_object_mut().expect("retrieval config is an object");
    for (k, v) in overrides {
        obj.insert(k, v);
    }
    let config: RetrievalConfig = serde_json::from_value(base).map_err(|e| {
        (
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("invalid config: {e}"),
        )
    })?;
    config
        .validate()
        .map_err(|e| (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(config)
}

fn status_for(e: &Error) -> Response {
    match e.class() {
        ErrorClass::Input => error(StatusCode::BAD_REQUEST, e.to_string()),
        ErrorClass::Config => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        ErrorClass::Backend | ErrorClass::Internal => {
            tracing::error!(error = %e, "retrieve failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
    }
}

async fn retrieve_handler(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: RetrieveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let config = match effective_config(&s.defaults, req.config) {
        Ok(c) => c,
        Err(r) => return reject(r),
    };
    let anchors = match (req.anchors, req.frames) {
        (Some(a), None) => match matrix(&a, "anchors") {
            Ok(m) => m,
            Err(r) => return reject(r),
        },
        (None, Some(f)) => {
            let frames = match matrix(&f, "frames") {
                Ok(m) => m,
                Err(r) => return reject(r),
            };
            let Some(w) = req.w else {
                return error(StatusCode::BAD_REQUEST, "frames require w");
            };
            match make_anchors(&frames, w, s.renormalize_anchors) {
                Ok(a) => a.anchors,
                Err(e) => return status_for(&e),
            }
        }
        _ => {
            return error(
                StatusCode::BAD_REQUEST,
                "exactly one of anchors or frames is required",
            )
        }
    };
    if anchors.dim() != s.bank.dim() {
        return error(
            StatusCode::BAD_REQUEST,
            format!(
                "anchor dimension {} does not match bank dimension {}",
                anchors.dim(),
                s.bank.dim()
            ),
        );
    }
    let state = s.clone();
    let outcome =
        tokio::task::spawn_blocking(move || retrieve(&state.bank, &anchors, &config)).await;
    match outcome {
        Ok(Ok(result)) => {
            let mut v = serde_json::to_value(&result).expect("result serializes");
            v["schema"] = Value::from(RETRIEVE_SCHEMA);
            (StatusCode::OK, Json(v)).into_response()
        }
        Ok(Err(e)) => status_for(&e),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal error"),
    }
}

/// A service running on a background thread; stops when dropped.
pub struct RunningService {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for RunningService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `bind` (port 0 picks a free port) and serves on a background thread.
pub fn spawn(state: AppState, bind: &str) -> std::io::Result<RunningService> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(Arc::new(state));
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(RunningService {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until interrupted.
pub fn serve_forever(state: AppState, bind: &str) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
