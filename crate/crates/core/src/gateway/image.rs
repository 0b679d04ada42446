//! Resolving image references to bytes for HTTP backends.
//!
//! `mock:<anything>` URIs stand for synthetic images whose bytes are the
//! URI itself. `http(s)://` URIs are fetched; anything else is a path,
//! optionally prefixed with `file://`.

use std::path::Path;

use super::GatewayError;
use crate::model::ImageRef;

pub const MOCK_SCHEME: &str = "mock:";

pub fn load_image_bytes(image: &ImageRef, agent: &ureq::Agent) -> Result<Vec<u8>, GatewayError> {
    let uri = image.uri.as_str();
    if uri.starts_with(MOCK_SCHEME) {
        return Ok(uri.as_bytes().to_vec());
    }
    if uri.starts_with("http://") || uri.starts_with("https://") {
        let mut resp = agent
            .get(uri)
            .call()
            .map_err(|e| GatewayError::BackendUnavailable(format!("fetching image {uri}: {e}")))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(GatewayError::InvalidRequest(format!("image {uri} returned {status}")));
        }
        return resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| GatewayError::BackendUnavailable(format!("reading image {uri}: {e}")));
    }
    let path = uri.strip_prefix("file://").unwrap_or(uri);
    std::fs::read(Path::new(path)).map_err(|e| GatewayError::InvalidRequest(format!("reading image {path}: {e}")))
}

/// Bytes for a reference without network access.
pub fn load_local_image_bytes(image: &ImageRef) -> std::io::Result<Vec<u8>> {
    let uri = image.uri.as_str();
    if uri.starts_with(MOCK_SCHEME) {
        return Ok(uri.as_bytes().to_vec());
    }
    std::fs::read(uri.strip_prefix("file://").unwrap_or(uri))
}
