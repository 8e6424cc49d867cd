//! Long-running HTTP service for guided Q-learning runs.
//!
//! Runs train on worker threads; clients watch them through a server-sent
//! event stream and can inject guidance or pause, resume and stop them.
//! Everything lives under `/v1`.

pub mod api;
pub mod config;
pub mod error;
pub mod run;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::router;
pub use config::{LlmSettings, RunConfig};
pub use error::{ApiError, Violation};
pub use run::{ControlVerb, QTableSnapshot, Registry, Run, RunInfo};

pub const ENV_DATA_DIR: &str = "QSHAPE_DATA_DIR";
pub const ENV_BIND_ADDR: &str = "QSHAPE_BIND_ADDR";
pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },

    #[error("data directory {path}: {source}")]
    DataDir { path: PathBuf, source: std::io::Error },

    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: String,
    pub data_dir: PathBuf,
    pub max_concurrent_runs: usize,
}

impl ServeOptions {
    /// Bind address and data directory from the environment.
    pub fn from_env() -> Self {
        ServeOptions {
            bind: std::env::var(ENV_BIND_ADDR).unwrap_or_else(|_| DEFAULT_BIND_ADDR.into()),
            data_dir: std::env::var(ENV_DATA_DIR).map_or_else(|_| PathBuf::from("qshape-data"), PathBuf::from),
            max_concurrent_runs: std::thread::available_parallelism().map_or(2, |n| n.get()),
        }
    }
}

/// Serves until `shutdown` resolves, then stops live runs and waits for
/// their logs to be written.
pub async fn serve_until(
    opts: ServeOptions,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    bound: Option<tokio::sync::oneshot::Sender<SocketAddr>>,
) -> Result<(), ServeError> {
    std::fs::create_dir_all(&opts.data_dir).map_err(|source| ServeError::DataDir {
        path: opts.data_dir.clone(),
        source,
    })?;
    let registry = Arc::new(Registry::new(Some(opts.data_dir.clone()), opts.max_concurrent_runs));
    let restored = registry.restore().map_err(|source| ServeError::DataDir {
        path: opts.data_dir.clone(),
        source,
    })?;
    let listener = tokio::net::TcpListener::bind(&opts.bind).await.map_err(|source| ServeError::Bind {
        addr: opts.bind.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;
    tracing::info!(%addr, restored, data_dir = %opts.data_dir.display(), "serving");
    if let Some(tx) = bound {
        let _ = tx.send(addr);
    }
    let reg = Arc::clone(&registry);
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async move {
            shutdown.await;
            tracing::info!("shutting down; stopping live runs");
            reg.shutdown().await;
        })
        .await?;
    Ok(())
}

/// Serves until interrupted.
pub async fn serve(opts: ServeOptions) -> Result<(), ServeError> {
    serve_until(
        opts,
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
        None,
    )
    .await
}
