//! `mock-serve`: the critic wire protocol answered from manifests.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::json;
use sha2::{Digest, Sha256};

use visicrit_core::gateway::image::load_local_image_bytes;
use visicrit_core::gateway::mock::{mock_classify, mock_salient};
use visicrit_core::gateway::protocol::{self, parse_classify_request, parse_salient_request};
use visicrit_core::model::{MixedModalRecord, MockManifest};

/// Manifests indexed by the digest of the image bytes a client sends.
#[derive(Debug, Default, Clone)]
pub struct ManifestIndex {
    by_digest: HashMap<[u8; 32], MockManifest>,
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl ManifestIndex {
    /// Images without manifests or with unreadable files are skipped.
    pub fn from_records(records: &[MixedModalRecord]) -> Self {
        let mut by_digest = HashMap::new();
        for img in records.iter().flat_map(|r| &r.images) {
            let Some(m) = &img.manifest else { continue };
            match load_local_image_bytes(img) {
                Ok(bytes) => {
                    by_digest.insert(digest(&bytes), m.clone());
                }
                Err(e) => log::warn!("image {} not indexed: {e}", img.id),
            }
        }
        Self { by_digest }
    }

    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }

    /// Unknown images show nothing.
    pub fn lookup(&self, image: &[u8]) -> MockManifest {
        self.by_digest.get(&digest(image)).cloned().unwrap_or_default()
    }
}

fn bad_request(e: protocol::ProtocolError) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": e.to_string() }))).into_response()
}

async fn classify(State(index): State<Arc<ManifestIndex>>, body: Bytes) -> Response {
    match parse_classify_request(&body) {
        Ok((req, image)) => Json(mock_classify(&index.lookup(&image), &req.feature)).into_response(),
        Err(e) => bad_request(e),
    }
}

async fn salient(State(index): State<Arc<ManifestIndex>>, body: Bytes) -> Response {
    match parse_salient_request(&body) {
        Ok((_, image)) => Json(mock_salient(&index.lookup(&image))).into_response(),
        Err(e) => bad_request(e),
    }
}

pub fn router(index: Arc<ManifestIndex>) -> Router {
    Router::new()
        .route(protocol::CLASSIFY_PATH, post(classify))
        .route(protocol::SALIENT_PATH, post(salient))
        .with_state(index)
}

/// Serve until Ctrl-C.
pub fn serve_blocking(index: ManifestIndex, addr: SocketAddr) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("mock critic listening on {}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(index)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

/// A server on a background thread; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(index: ManifestIndex, addr: SocketAddr) -> anyhow::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let _ = axum::serve(listener, router(Arc::new(index)))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
