//! HTTP front end: `POST /similar`, `POST /duplicate`, `GET /healthz`.
//!
//! Similar-exercise requests go through a bounded queue to a batcher task that
//! gathers everything arriving within the batch window and runs it as one
//! [`Engine::query_batch`] call. A full queue answers 429.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fse_core::engine::{Engine, QueryOutcome, QueryTarget, ServiceConfig, SimilarRequest};
use fse_core::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

pub const CACHE_HEADER: &str = "x-cache";
/// Seconds suggested to a client turned away by a full queue.
pub const RETRY_AFTER_SECS: u64 = 1;

pub type Reply = oneshot::Sender<fse_core::Result<QueryOutcome>>;
pub type Job = (SimilarRequest, Reply);

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub queue: mpsc::Sender<Job>,
}

impl AppState {
    /// Starts the batcher on the current runtime.
    pub fn start(engine: Arc<Engine>, cfg: &ServiceConfig) -> Self {
        let (tx, rx) = mpsc::channel(cfg.queue_capacity);
        let window = Duration::from_millis(cfg.batch_window_ms);
        tokio::spawn(run_batcher(engine.clone(), rx, window, cfg.max_batch));
        Self { engine, queue: tx }
    }
}

/// Waits for a first job, keeps collecting until the window closes or the
/// batch is full, then executes the batch off the async threads.
pub async fn run_batcher(
    engine: Arc<Engine>,
    mut rx: mpsc::Receiver<Job>,
    window: Duration,
    max_batch: usize,
) {
    while let Some(first) = rx.recv().await {
        let mut jobs = vec![first];
        let deadline = tokio::time::Instant::now() + window;
        while jobs.len() < max_batch {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some(job)) => jobs.push(job),
                Ok(None) | Err(_) => break,
            }
        }
        let (reqs, replies): (Vec<SimilarRequest>, Vec<Reply>) = jobs.into_iter().unzip();
        let engine = engine.clone();
        let results = tokio::task::spawn_blocking(move || engine.query_batch(&reqs)).await;
        match results {
            Ok(results) => {
                for (reply, res) in replies.into_iter().zip(results) {
                    let _ = reply.send(res);
                }
            }
            Err(e) => log::error!("batch worker failed: {e}"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn engine_error(e: Error) -> Response {
    let status = match &e {
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Validation(_) | Error::InvalidArgument(_) | Error::Parse { .. } | Error::Json(_) => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, e.to_string())
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body)
        .map_err(|e| error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

async fn similar(State(state): State<AppState>, body: Bytes) -> Response {
    let req: SimilarRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let (tx, rx) = oneshot::channel();
    if state.queue.try_send((req, tx)).is_err() {
        let mut resp = error_response(StatusCode::TOO_MANY_REQUESTS, "server overloaded; retry later");
        resp.headers_mut()
            .insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        return resp;
    }
    match rx.await {
        Ok(Ok(out)) => {
            let mut resp = Json(&*out.result).into_response();
            let tag = if out.cache_hit { "hit" } else { "miss" };
            resp.headers_mut().insert(CACHE_HEADER, HeaderValue::from_static(tag));
            resp
        }
        Ok(Err(e)) => engine_error(e),
        Err(_) => error_response(StatusCode::SERVICE_UNAVAILABLE, "query worker stopped"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DuplicateRequest {
    pub a: QueryTarget,
    pub b: QueryTarget,
}

async fn duplicate(State(state): State<AppState>, body: Bytes) -> Response {
    let req: DuplicateRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let engine = state.engine.clone();
    match tokio::task::spawn_blocking(move || engine.duplicate(&req.a, &req.b)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => engine_error(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub exercises: usize,
    pub versions: fse_core::engine::SnapshotVersions,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        exercises: state.engine.corpus().len(),
        versions: state.engine.versions().clone(),
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/similar", post(similar))
        .route("/duplicate", post(duplicate))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Binds the configured port and serves until the process ends.
pub async fn serve(engine: Engine, port: u16) -> anyhow::Result<()> {
    let cfg = engine.config().service.clone();
    let state = AppState::start(Arc::new(engine), &cfg);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
