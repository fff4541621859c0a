//! Breakable Machine classroom server.
//!
//! One process hosts the game for a classroom: it loads a BMN1 model, serves
//! the browser app and the read-only dataset over HTTP, and speaks the JSON
//! realtime protocol over a websocket at `/rt`. Only peers on the local
//! network are served.
//!
//! ```no_run
//! # async fn demo() -> Result<(), bm_server::ServerError> {
//! let config = bm_server::ServerConfig::new("model.bmn");
//! let server = bm_server::Server::bind(config).await?;
//! println!("{}", bm_server::session_banner(server.first_session()));
//! server.run(std::future::pending()).await;
//! # Ok(())
//! # }
//! ```

mod app;
mod conn;
pub mod dataset;
mod error;
pub mod net;

use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bm_core::session::{Registry, RegistryConfig, SessionConfig, DEFAULT_MAX_SESSIONS};
use bm_core::{decode_model, Model};
use tokio::net::TcpListener;

pub use app::{router, AppState, Introspection, SessionInfo, JOIN_TOKEN_HEADER, TEACHER_KEY_HEADER};
pub use dataset::{Dataset, LabelImages, Manifest};
pub use error::ServerError;
pub use net::{is_local, AuditedListener, NetAudit, NetCounts, PeerAddr};

pub const DEFAULT_PORT: u16 = 8080;
/// Frames per second each player may submit.
pub const DEFAULT_FRAME_RATE: f64 = 5.0;
/// How long shutdown waits for clients to close after their farewell.
const SHUTDOWN_GRACE: Duration = Duration::from_secs(3);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub model: PathBuf,
    pub dataset: Option<PathBuf>,
    pub bind: IpAddr,
    /// 0 picks a free port.
    pub port: u16,
    /// Host name or address put in printed URLs. Defaults to the bind
    /// address, or this machine's LAN address when binding the wildcard.
    pub advertise: Option<String>,
    pub session: SessionConfig,
    pub max_sessions: usize,
    pub frame_rate: f64,
    /// Directory holding the built browser app.
    pub web_root: Option<PathBuf>,
    /// Print replacement sessions to stdout.
    pub announce: bool,
}

impl ServerConfig {
    pub fn new(model: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            dataset: None,
            bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            port: DEFAULT_PORT,
            advertise: None,
            session: SessionConfig::default(),
            max_sessions: DEFAULT_MAX_SESSIONS,
            frame_rate: DEFAULT_FRAME_RATE,
            web_root: None,
            announce: false,
        }
    }
}

pub fn join_url(base: &str, token: &str) -> String {
    format!("{base}/join/{token}")
}

/// Teacher entry point; the credential rides in the fragment, which browsers
/// never send to the server.
pub fn teacher_url(base: &str, key: &str) -> String {
    format!("{base}/#teacher={key}")
}

/// Console lines announcing a session.
pub fn session_banner(info: &SessionInfo) -> String {
    format!(
        "Teacher URL:        {}\nTeacher credential: {}\nStudent join URL:   {}",
        info.teacher_url, info.teacher_key, info.join_url
    )
}

pub fn load_model(path: &Path) -> Result<Model, ServerError> {
    let bytes = std::fs::read(path).map_err(|source| ServerError::ModelRead {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes).map_err(|source| ServerError::ModelInvalid {
        path: path.to_path_buf(),
        source,
    })
}

fn host_for_url(config: &ServerConfig) -> String {
    if let Some(host) = &config.advertise {
        return host.clone();
    }
    let ip = if config.bind.is_unspecified() {
        net::lan_address().unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST))
    } else {
        config.bind
    };
    match ip {
        IpAddr::V6(v6) => format!("[{v6}]"),
        IpAddr::V4(v4) => v4.to_string(),
    }
}

/// A bound, ready server with its first session already created.
pub struct Server {
    state: Arc<AppState>,
    listener: AuditedListener,
    local_addr: SocketAddr,
    first: SessionInfo,
}

impl Server {
    pub async fn bind(config: ServerConfig) -> Result<Self, ServerError> {
        let model = Arc::new(load_model(&config.model)?);
        let dataset = match &config.dataset {
            Some(dir) => Dataset::load(dir)?,
            None => Dataset::empty(),
        };
        for label in &dataset.manifest().labels {
            if !model.labels().contains(&label.label_name) {
                log::warn!("a dataset label is not one of the model's labels");
            }
        }
        if !net::is_bindable(config.bind) {
            return Err(ServerError::NonLocalBind(config.bind));
        }
        let addr = SocketAddr::new(config.bind, config.port);
        let tcp = TcpListener::bind(addr)
            .await
            .map_err(|source| ServerError::Bind { addr, source })?;
        let local_addr = tcp.local_addr().map_err(|source| ServerError::Bind { addr, source })?;
        let base_url = format!("http://{}:{}", host_for_url(&config), local_addr.port());

        let net = Arc::new(NetAudit::default());
        let state = Arc::new(AppState::new(app::AppParts {
            registry: Registry::new(RegistryConfig {
                max_sessions: config.max_sessions,
            }),
            model,
            session_config: config.session.clone(),
            dataset,
            net: net.clone(),
            base_url,
            frame_rate: config.frame_rate,
            web_root: config.web_root.clone(),
            announce: config.announce,
        }));
        let first = state.start_session()?;
        log::info!("listening on {local_addr}");
        Ok(Self {
            state,
            listener: AuditedListener::new(tcp, net),
            local_addr,
            first,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn first_session(&self) -> &SessionInfo {
        &self.first
    }

    /// Serves until `shutdown` resolves, then ends every session and gives
    /// clients a moment to receive their farewell.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) {
        let state = self.state.clone();
        let app = router(self.state).into_make_service_with_connect_info::<PeerAddr>();
        let (stopped_tx, stopped_rx) = tokio::sync::oneshot::channel::<()>();
        let serve = axum::serve(self.listener, app).with_graceful_shutdown(async move {
            shutdown.await;
            log::info!("shutting down");
            state.shut_down();
            let _ = stopped_tx.send(());
        });
        let deadline = async {
            if stopped_rx.await.is_ok() {
                tokio::time::sleep(SHUTDOWN_GRACE).await;
            } else {
                std::future::pending::<()>().await;
            }
        };
        tokio::select! {
            result = serve => {
                if let Err(e) = result {
                    log::error!("server error: {e}");
                }
            }
            _ = deadline => log::warn!("closing connections that ignored the farewell"),
        }
    }
}
