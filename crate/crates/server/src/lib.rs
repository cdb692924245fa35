//! HTTP front end for the mesh gateway.
//!
//! Every request, whatever its path, is handed to [`Gateway::handle`] on the
//! blocking pool. The response carries the gateway's JSON body and an
//! `X-Trace-Id` header.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::to_bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use rustls::ServerConfig;
use rustls_pki_types::pem::PemObject;
use rustls_pki_types::{CertificateDer, PrivateKeyDer};
use s3m_core::facility::FacilityDocument;
use s3m_core::gateway::{ApiRequest, Gateway};
use s3m_core::policy::PolicyDocument;
use serde::de::DeserializeOwned;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_rustls::server::TlsStream;
use tokio_rustls::TlsAcceptor;

pub const TRACE_HEADER: &str = "x-trace-id";
pub const BIND_ENV: &str = "S3M_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 32 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("TLS material in {path}: {reason}")]
    Pem { path: PathBuf, reason: String },
    #[error("TLS configuration: {0}")]
    Tls(#[from] rustls::Error),
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ServerError> {
    let text = std::fs::read(path).map_err(|source| ServerError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&text).map_err(|source| ServerError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_policy(path: &Path) -> Result<PolicyDocument, ServerError> {
    load_json(path)
}

pub fn load_facility(path: &Path) -> Result<FacilityDocument, ServerError> {
    load_json(path)
}

/// Builds a rustls server config from PEM certificate chain and private key files.
pub fn tls_config(cert: &Path, key: &Path) -> Result<Arc<ServerConfig>, ServerError> {
    let pem_err = |path: &Path, e: rustls_pki_types::pem::Error| ServerError::Pem {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let chain = CertificateDer::pem_file_iter(cert)
        .map_err(|e| pem_err(cert, e))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| pem_err(cert, e))?;
    if chain.is_empty() {
        return Err(ServerError::Pem {
            path: cert.to_path_buf(),
            reason: "no certificates found".into(),
        });
    }
    let key_der = PrivateKeyDer::from_pem_file(key).map_err(|e| pem_err(key, e))?;
    let config = ServerConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
        .with_safe_default_protocol_versions()?
        .with_no_client_auth()
        .with_single_cert(chain, key_der)?;
    Ok(Arc::new(config))
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new().fallback(dispatch).with_state(gateway)
}

async fn dispatch(State(gateway): State<Arc<Gateway>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let body = match to_bytes(body, MAX_BODY_BYTES).await {
        Ok(b) => b,
        Err(e) => return (StatusCode::PAYLOAD_TOO_LARGE, e.to_string()).into_response(),
    };
    let target = parts.uri.path_and_query().map_or("/", |pq| pq.as_str());
    let mut api = ApiRequest::new(parts.method.as_str(), target);
    api.authorization = parts
        .headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    api.body = body.to_vec();

    let result = tokio::task::spawn_blocking(move || gateway.handle(api)).await;
    let Ok(resp) = result else {
        return (StatusCode::INTERNAL_SERVER_ERROR, "gateway task failed").into_response();
    };
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let mut out = (status, axum::Json(resp.body)).into_response();
    if let Ok(v) = HeaderValue::from_str(&resp.trace_id) {
        out.headers_mut().insert(TRACE_HEADER, v);
    }
    out
}

/// Accepts TCP connections and completes TLS handshakes off the accept path,
/// so a stalled client cannot block others.
pub struct TlsListener {
    local: SocketAddr,
    ready: mpsc::Receiver<(TlsStream<TcpStream>, SocketAddr)>,
}

impl TlsListener {
    pub fn new(tcp: TcpListener, config: Arc<ServerConfig>) -> io::Result<Self> {
        let local = tcp.local_addr()?;
        let acceptor = TlsAcceptor::from(config);
        let (tx, ready) = mpsc::channel(64);
        tokio::spawn(async move {
            loop {
                let (stream, peer) = match tcp.accept().await {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                        continue;
                    }
                };
                let acceptor = acceptor.clone();
                let tx = tx.clone();
                tokio::spawn(async move {
                    match acceptor.accept(stream).await {
                        Ok(tls) => {
                            let _ = tx.send((tls, peer)).await;
                        }
                        Err(e) => log::debug!("TLS handshake with {peer} failed: {e}"),
                    }
                });
            }
        });
        Ok(TlsListener { local, ready })
    }
}

impl axum::serve::Listener for TlsListener {
    type Io = TlsStream<TcpStream>;
    type Addr = SocketAddr;

    async fn accept(&mut self) -> (Self::Io, Self::Addr) {
        match self.ready.recv().await {
            Some(conn) => conn,
            // the accept task only ends with the runtime
            None => std::future::pending().await,
        }
    }

    fn local_addr(&self) -> io::Result<Self::Addr> {
        Ok(self.local)
    }
}

/// Serves `gateway` on `tcp` until `shutdown` resolves. With `tls`, every
/// connection must complete a TLS handshake first.
pub async fn serve(
    tcp: TcpListener,
    gateway: Arc<Gateway>,
    tls: Option<Arc<ServerConfig>>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    let app = router(gateway);
    match tls {
        Some(cfg) => {
            axum::serve(TlsListener::new(tcp, cfg)?, app)
                .with_graceful_shutdown(shutdown)
                .await
        }
        None => axum::serve(tcp, app).with_graceful_shutdown(shutdown).await,
    }
}
