use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use wpnav_core::policy::{PolicyError, PolicyModel};

use crate::protocol::{self, FieldError, Health, PredictResponse, PROTOCOL_VERSION};

/// Host the server binds to when set; defaults to loopback.
pub const BIND_ENV: &str = "WPNAV_BIND";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("invalid request at {}: {}", .0.field, .0.message)]
    Validation(FieldError),
    #[error("no checkpoint loaded")]
    NotReady,
    #[error("model failure: {0}")]
    Model(String),
    #[error("cannot load checkpoint: {0}")]
    Load(String),
    #[error("invalid bind address {0:?}")]
    Bind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServeError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServeError::Validation(_) => StatusCode::BAD_REQUEST,
            ServeError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let body = match &self {
            ServeError::Validation(f) => json!({
                "error": { "kind": "validation", "field": f.field, "message": f.message }
            }),
            other => json!({ "error": { "kind": kind(other), "message": other.to_string() } }),
        };
        (self.status(), Json(body)).into_response()
    }
}

fn kind(e: &ServeError) -> &'static str {
    match e {
        ServeError::Validation(_) => "validation",
        ServeError::NotReady => "not_ready",
        ServeError::Model(_) => "model",
        _ => "internal",
    }
}

/// A checkpoint in service.
#[derive(Debug)]
pub struct Loaded {
    pub model: PolicyModel,
    pub checkpoint_id: String,
    pub config_hash: String,
}

impl Loaded {
    pub fn from_bytes(bytes: &[u8], checkpoint_id: impl Into<String>) -> Result<Self, ServeError> {
        let model = PolicyModel::from_bytes(bytes).map_err(|e| ServeError::Load(e.to_string()))?;
        Ok(Self {
            model,
            checkpoint_id: checkpoint_id.into(),
            config_hash: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn from_model(model: PolicyModel, checkpoint_id: impl Into<String>) -> Self {
        let bytes = model.to_bytes();
        Self {
            model,
            checkpoint_id: checkpoint_id.into(),
            config_hash: hex::encode(Sha256::digest(&bytes)),
        }
    }

    /// Short identifier returned with every prediction.
    pub fn model_id(&self) -> String {
        format!("{}@{}", self.checkpoint_id, &self.config_hash[..12])
    }
}

/// Shared server state. Predictions take a snapshot of the current
/// checkpoint; swapping it waits for the write lock only.
#[derive(Debug)]
pub struct ServerState {
    current: RwLock<Option<Arc<Loaded>>>,
    started: Instant,
}

impl Default for ServerState {
    fn default() -> Self {
        Self::new()
    }
}

impl ServerState {
    pub fn new() -> Self {
        Self {
            current: RwLock::new(None),
            started: Instant::now(),
        }
    }

    pub fn with_checkpoint(path: &Path) -> Result<Self, ServeError> {
        let s = Self::new();
        s.load_checkpoint(path)?;
        Ok(s)
    }

    /// Load `path` and swap it in; the id is the file stem.
    pub fn load_checkpoint(&self, path: &Path) -> Result<(), ServeError> {
        let bytes = std::fs::read(path).map_err(|e| ServeError::Load(format!("{}: {e}", path.display())))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.install(Loaded::from_bytes(&bytes, id)?);
        Ok(())
    }

    pub fn install(&self, loaded: Loaded) {
        let mut slot = self.current.write().unwrap_or_else(|e| e.into_inner());
        log::info!("serving checkpoint {} ({})", loaded.checkpoint_id, loaded.config_hash);
        *slot = Some(Arc::new(loaded));
    }

    pub fn current(&self) -> Option<Arc<Loaded>> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn health(&self) -> Health {
        let uptime_s = self.started.elapsed().as_secs_f64();
        match self.current() {
            Some(l) => Health {
                status: "ready".into(),
                checkpoint_id: Some(l.checkpoint_id.clone()),
                config_hash: Some(l.config_hash.clone()),
                uptime_s,
                horizon: Some(l.model.config.horizon),
                context_n: Some(l.model.config.context_n),
            },
            None => Health {
                status: "not ready".into(),
                checkpoint_id: None,
                config_hash: None,
                uptime_s,
                horizon: None,
                context_n: None,
            },
        }
    }

    /// Validate, predict and time one request body.
    pub fn predict(&self, body: &[u8]) -> Result<PredictResponse, ServeError> {
        let t0 = Instant::now();
        let loaded = self.current().ok_or(ServeError::NotReady)?;
        let req = protocol::parse_request(body).map_err(ServeError::Validation)?;
        let window = protocol::build_window(&req, &loaded.model.config).map_err(ServeError::Validation)?;
        let out = loaded.model.predict(&window).map_err(|e| match e {
            PolicyError::Window(m) => ServeError::Validation(FieldError::new("frames", m)),
            other => ServeError::Model(other.to_string()),
        })?;
        if out.waypoints.len() != loaded.model.config.horizon
            || !(0.0..=1.0).contains(&out.arrival_prob)
            || out.waypoints.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(ServeError::Model("model produced an invalid prediction".into()));
        }
        Ok(PredictResponse {
            protocol_version: PROTOCOL_VERSION,
            waypoints: out.waypoints,
            arrival_prob: out.arrival_prob,
            model_id: loaded.model_id(),
            latency_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }
}

async fn predict_handler(State(state): State<Arc<ServerState>>, body: Bytes) -> Response {
    let res = tokio::task::spawn_blocking(move || state.predict(&body)).await;
    match res {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => {
            if !matches!(e, ServeError::Validation(_)) {
                log::error!("{e}");
            }
            e.into_response()
        }
        Err(e) => ServeError::Model(format!("prediction task failed: {e}")).into_response(),
    }
}

async fn health_handler(State(state): State<Arc<ServerState>>) -> Json<Health> {
    Json(state.health())
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/predict", post(predict_handler))
        .route("/health", get(health_handler))
        .with_state(state)
}

/// Address for `port` on the host named by `WPNAV_BIND` (default 127.0.0.1).
pub fn bind_addr(port: u16) -> Result<SocketAddr, ServeError> {
    let ip = match std::env::var(BIND_ENV) {
        Ok(h) if !h.trim().is_empty() => h.trim().parse::<IpAddr>().map_err(|_| ServeError::Bind(h))?,
        _ => IpAddr::V4(Ipv4Addr::LOCALHOST),
    };
    Ok(SocketAddr::new(ip, port))
}

/// A bound server, ready to run.
pub struct Server {
    listener: tokio::net::TcpListener,
    state: Arc<ServerState>,
}

impl Server {
    pub async fn bind(addr: SocketAddr, state: Arc<ServerState>) -> Result<Self, ServeError> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        Ok(Self { listener, state })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServeError> {
        Ok(self.listener.local_addr()?)
    }

    pub async fn run(self) -> Result<(), ServeError> {
        axum::serve(self.listener, router(self.state)).await?;
        Ok(())
    }

    pub async fn run_until_ctrl_c(self) -> Result<(), ServeError> {
        axum::serve(self.listener, router(self.state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    }
}

/// Start a server on a background runtime thread and return its address.
/// Meant for tests and embedding; the thread lives until the process exits.
pub fn spawn_background(addr: SocketAddr, state: Arc<ServerState>) -> Result<SocketAddr, ServeError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let server = rt.block_on(Server::bind(addr, state))?;
    let local = server.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = rt.block_on(server.run()) {
            log::error!("server stopped: {e}");
        }
    });
    Ok(local)
}

/// Serve on `addr` until Ctrl-C, calling `on_bound` with the bound address.
pub fn run_blocking(
    addr: SocketAddr,
    state: Arc<ServerState>,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<(), ServeError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let server = Server::bind(addr, state).await?;
        on_bound(server.local_addr()?);
        server.run_until_ctrl_c().await
    })
}
