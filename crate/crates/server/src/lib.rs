//! Read-only HTTP/JSON service over precomputed attention atlases.
//!
//! | route | payload |
//! |---|---|
//! | `GET /models` | atlas summaries, sorted by id |
//! | `GET /models/{m}/matrix?method&dim&color` | every head, at most 1000 points each, with badges |
//! | `GET /models/{m}/heads/{layer}/{head}?method&dim&color` | one head in full |
//! | `GET /models/{m}/sequences/{sid}/attention/{layer}/{head}?hide=0,3` | one sequence's attention after hiding |
//! | `GET /models/{m}/search?q&mode&method&dim[&layer&head]` | token matches and their dispersion per head |
//! | `GET /models/{m}/diagnostics` | per-head diagnostics |
//!
//! `hide` hides positions on both sides; `hide_keys` and `hide_queries` hide
//! one side only. Edges and zero-row flags refer to the re-normalized matrix.
//!
//! Errors are JSON `{"error": ..., "valid": [...]}` with 404 for unknown
//! models, heads and sequences and 400 for bad parameters.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use axum::http::HeaderValue;
use axum::routing::get;
use axum::Router;
use tower_http::cors::{Any, CorsLayer};

mod catalog;
mod error;
pub mod routes;

pub use catalog::{Catalog, LoadError, LoadedAtlas};
pub use error::ApiError;

pub const DEFAULT_PORT: u16 = 8470;

#[derive(Debug, Clone)]
pub struct AppState {
    pub catalog: Arc<Catalog>,
}

impl AppState {
    pub fn new(catalog: Catalog) -> Self {
        AppState { catalog: Arc::new(catalog) }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/models", get(routes::models))
        .route("/models/{m}/matrix", get(routes::matrix))
        .route("/models/{m}/heads/{layer}/{head}", get(routes::head))
        .route("/models/{m}/sequences/{sid}/attention/{layer}/{head}", get(routes::sequence_attention))
        .route("/models/{m}/search", get(routes::search))
        .route("/models/{m}/diagnostics", get(routes::diagnostics))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    /// `*` allows any origin; unset disables CORS headers.
    pub cors_origin: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
    #[error("{addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

pub fn app(catalog: Catalog, cors_origin: Option<&str>) -> Result<Router, ServeError> {
    let router = router(AppState::new(catalog));
    Ok(match cors_origin {
        None => router,
        Some("*") => router.layer(CorsLayer::new().allow_origin(Any).allow_methods(Any)),
        Some(o) => {
            let origin = HeaderValue::from_str(o).map_err(|_| ServeError::Cors(o.to_string()))?;
            router.layer(CorsLayer::new().allow_origin(origin).allow_methods(Any))
        }
    })
}

/// Load every atlas under `cfg.data_dir` and serve on localhost until Ctrl-C.
/// `on_ready` receives the bound address and the number of atlases.
pub async fn serve(cfg: ServeConfig, on_ready: impl FnOnce(SocketAddr, usize)) -> Result<(), ServeError> {
    let catalog = Catalog::load(&cfg.data_dir)?;
    let count = catalog.len();
    let app = app(catalog, cfg.cors_origin.as_deref())?;
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })?;
    on_ready(listener.local_addr()?, count);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
