//! Control server: device wire listener, admin HTTP API with a push event
//! stream, and the modem's network endpoint, all sharing one world.

pub mod http;
pub mod hub;
mod net;

use std::fs::{File, OpenOptions};
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use campus_pass_core::config::Settings;
use campus_pass_core::time::Clock;
use campus_pass_core::world::{ReplayError, World, WorldError};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use http::ADMIN_TOKEN_HEADER;
pub use hub::Hub;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{context} {path}: {source}")]
    File {
        context: &'static str,
        path: PathBuf,
        source: io::Error,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    CorruptLog(#[from] ReplayError),
    #[error("seeding failed: {0}")]
    Seed(#[from] WorldError),
}

fn open_append(path: &Path, context: &'static str) -> Result<File, ServerError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| ServerError::File {
            context,
            path: path.to_path_buf(),
            source,
        })
}

/// Rebuilds the world from the event log, seeds it when the log is empty, and
/// attaches the log and modem transcript files.
pub fn load_world(settings: &Settings, clock: &dyn Clock) -> Result<World, ServerError> {
    let mut world = match &settings.server.event_log {
        Some(path) => {
            let bytes = match std::fs::read(path) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                Err(source) => {
                    return Err(ServerError::File {
                        context: "cannot read event log",
                        path: path.clone(),
                        source,
                    })
                }
            };
            let mut world = World::replay(settings.world.clone(), &bytes, None)?;
            world.set_event_sink(Box::new(open_append(path, "cannot open event log")?));
            world
        }
        None => World::new(settings.world.clone(), None),
    };
    if let Some(path) = &settings.server.modem_transcript {
        world.set_modem_transcript(Box::new(open_append(path, "cannot open modem transcript")?));
    }
    if world.events().is_empty() {
        world.seed(clock.now())?;
    }
    Ok(world)
}

/// A running server. Dropping it leaves the tasks running; call `abort` to stop.
pub struct Running {
    pub wire_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub modem_addr: SocketAddr,
    pub hub: Arc<Hub>,
    tasks: Vec<JoinHandle<()>>,
}

impl Running {
    pub fn abort(&self) {
        for task in &self.tasks {
            task.abort();
        }
    }

    /// Waits until any listener stops.
    pub async fn wait(mut self) {
        let tasks = std::mem::take(&mut self.tasks);
        let _ = futures::future::select_all(tasks).await;
    }
}

async fn bind(addr: &str) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })
}

fn local_addr(listener: &TcpListener, addr: &str) -> Result<SocketAddr, ServerError> {
    listener.local_addr().map_err(|source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    })
}

/// Loads the world and starts all listeners. Port 0 picks a free port; the
/// bound addresses are reported in `Running`.
pub async fn start(settings: &Settings, clock: Arc<dyn Clock>) -> Result<Running, ServerError> {
    let world = load_world(settings, clock.as_ref())?;
    let hub = Arc::new(Hub::new(world, clock));
    let s = &settings.server;

    let wire = bind(&s.wire_addr).await?;
    let http = bind(&s.http_addr).await?;
    let modem = bind(&s.modem_addr).await?;
    let wire_addr = local_addr(&wire, &s.wire_addr)?;
    let http_addr = local_addr(&http, &s.http_addr)?;
    let modem_addr = local_addr(&modem, &s.modem_addr)?;

    let app = http::router(hub.clone(), s.admin_token.clone());
    let tasks = vec![
        tokio::spawn(net::serve_devices(wire, hub.clone())),
        tokio::spawn(net::serve_modem(modem, hub.clone())),
        tokio::spawn(async move {
            if let Err(e) = axum::serve(http, app).await {
                tracing::error!(error = %e, "http server stopped");
            }
        }),
    ];
    tracing::info!(%wire_addr, %http_addr, %modem_addr, "server listening");
    Ok(Running {
        wire_addr,
        http_addr,
        modem_addr,
        hub,
        tasks,
    })
}
