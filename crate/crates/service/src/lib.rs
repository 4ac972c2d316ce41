//! HTTP inference service: generation, projection jobs, PCA summaries and
//! latent archive round trips over the models in one directory.

mod api;
pub mod config;
pub mod error;
mod jobs;
mod state;

use std::sync::Arc;

pub use api::{router, session_hash};
pub use config::ServiceConfig;
pub use error::ServiceError;
pub use jobs::{JobStatus, LossSummary};
pub use state::{AppState, LoadedModel, SlotState, W_MEAN_SEED};

/// Loads every registered model on the blocking pool; requests for a model
/// get 503 until it is ready.
pub fn spawn_loading(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    tokio::task::spawn_blocking(move || {
        for id in state.models.keys() {
            let _ = state.load_model(id);
        }
    })
}

/// Serves on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> Result<(), ServiceError> {
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}

/// Binds `host:port`, starts loading models and serves until the process
/// ends.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServiceError::Config(format!("cannot bind {addr}: {e}")))?;
    let state = AppState::new(config)?;
    tracing::info!(%addr, models = state.models.len(), "listening");
    spawn_loading(state.clone());
    serve_on(listener, state).await
}
