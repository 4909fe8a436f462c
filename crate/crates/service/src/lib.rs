//! HTTP/JSON front end for a trained checkpoint.
//!
//! | method | path           | body                 |
//! |--------|----------------|----------------------|
//! | GET    | `/v1/health`   |                      |
//! | GET    | `/v1/model`    |                      |
//! | POST   | `/v1/recommend`| [`RecommendRequest`] |
//! | POST   | `/v1/generate` | [`GenerateRequest`]  |
//!
//! Bad requests get 400 with `{"error", "path"}`; a phrase missing from a
//! store-backed provider gets 422. The checkpoint is never mutated, so
//! requests run concurrently on blocking worker threads.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pmuse_core::api::{
    ApiError, Engine, ErrorKind, GenerateRequest, HealthResponse, ModelSummary, RecommendRequest, RequestCounts,
};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;

pub use pmuse_core::api;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const ADDR_ENV: &str = "PMUSE_ADDR";

pub struct ServiceState {
    engine: Arc<Engine>,
    recommend: AtomicU64,
    generate: AtomicU64,
}

impl ServiceState {
    pub fn new(engine: Engine) -> Self {
        Self { engine: Arc::new(engine), recommend: AtomicU64::new(0), generate: AtomicU64::new(0) }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn counts(&self) -> RequestCounts {
        RequestCounts { recommend: self.recommend.load(Ordering::Relaxed), generate: self.generate.load(Ordering::Relaxed) }
    }
}

/// Address to bind: `PMUSE_ADDR` wins over the flag, which wins over the default.
pub fn resolve_addr(flag: Option<&str>) -> String {
    std::env::var(ADDR_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .or_else(|| flag.map(str::to_string))
        .unwrap_or_else(|| DEFAULT_ADDR.to_string())
}

struct Failure(ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = match self.0.kind {
            ErrorKind::Invalid => StatusCode::BAD_REQUEST,
            ErrorKind::UnknownPhrase => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.0.body())).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Failure> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { String::new() } else { path };
        Failure(ApiError::invalid(path, e.into_inner().to_string()))
    })
}

async fn run_blocking<T, F>(state: &Arc<ServiceState>, f: F) -> Result<Json<T>, Failure>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
{
    let engine = Arc::clone(&state.engine);
    match tokio::task::spawn_blocking(move || f(&engine)).await {
        Ok(result) => result.map(Json).map_err(Failure),
        Err(e) => Err(Failure(ApiError::internal(format!("worker failed: {e}")))),
    }
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse { status: "ok".into() })
}

async fn model(State(state): State<Arc<ServiceState>>) -> Json<ModelSummary> {
    Json(state.engine.summary(state.counts()))
}

async fn recommend(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    state.recommend.fetch_add(1, Ordering::Relaxed);
    let req: RecommendRequest = match parse(&body) {
        Ok(r) => r,
        Err(f) => return f.into_response(),
    };
    run_blocking(&state, move |e| e.recommend(&req)).await.into_response()
}

async fn generate(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    state.generate.fetch_add(1, Ordering::Relaxed);
    let req: GenerateRequest = match parse(&body) {
        Ok(r) => r,
        Err(f) => return f.into_response(),
    };
    run_blocking(&state, move |e| e.generate(&req)).await.into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model))
        .route("/v1/recommend", post(recommend))
        .route("/v1/generate", post(generate))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: TcpListener, state: Arc<ServiceState>) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
