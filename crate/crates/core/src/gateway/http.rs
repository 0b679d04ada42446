//! HTTP backend.
//!
//! Text roles post a chat-completion body with one user message whose
//! images travel as base64 data URLs. Critic roles speak the critic wire
//! protocol against `endpoint` as a base URL. Embedders post
//! `{"model","input"}` or `{"model","image"}` and accept either
//! `{"embedding":[...]}` or `{"data":[{"embedding":[...]}]}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::image::load_image_bytes;
use super::protocol::{self, ClassifyRequest, SalientRequest};
use super::{Backend, EmbeddingPayload, GatewayError, ModelRequest, ModelRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub model: Option<String>,
}

fn default_timeout() -> u64 {
    60
}

pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: HttpBackendConfig) -> Self {
        let token = config.auth_env.as_deref().and_then(|v| std::env::var(v).ok());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: id.into(),
            config,
            token,
            agent,
        }
    }

    fn post(&self, url: &str, body: &[u8]) -> Result<Vec<u8>, GatewayError> {
        let mut builder = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            builder = builder.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = builder.send(body).map_err(|e| match e {
            ureq::Error::StatusCode(status) => GatewayError::BackendError {
                status,
                body: String::new(),
            },
            other => GatewayError::BackendUnavailable(format!("{url}: {other}")),
        })?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| GatewayError::BackendUnavailable(format!("{url}: reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::BackendError {
                status,
                body: String::from_utf8_lossy(&bytes).into_owned(),
            });
        }
        Ok(bytes)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn image_b64(&self, req: &ModelRequest, idx: usize) -> Result<String, GatewayError> {
        let img = req
            .images
            .get(idx)
            .ok_or_else(|| GatewayError::InvalidRequest("missing image".into()))?;
        Ok(protocol::encode_image(&load_image_bytes(img, &self.agent)?))
    }

    fn chat(&self, req: &ModelRequest) -> Result<Vec<u8>, GatewayError> {
        let prompt = req
            .prompt
            .as_ref()
            .ok_or_else(|| GatewayError::InvalidRequest("missing prompt".into()))?;
        let mut content = vec![json!({"type": "text", "text": prompt.text})];
        for i in 0..req.images.len() {
            let data = self.image_b64(req, i)?;
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{data}")}
            }));
        }
        let body = json!({
            "model": self.config.model.as_deref().unwrap_or(&self.id),
            "messages": [{"role": "user", "content": content}],
        });
        let bytes = self.post(&self.config.endpoint, body.to_string().as_bytes())?;
        extract_chat_content(&bytes).map(String::into_bytes)
    }

    fn embedding(&self, req: &ModelRequest) -> Result<Vec<u8>, GatewayError> {
        let model = self.config.model.as_deref().unwrap_or(&self.id);
        let body = match req.role {
            ModelRole::TextEmbedder => json!({"model": model, "input": req.input}),
            _ => json!({"model": model, "image": self.image_b64(req, 0)?}),
        };
        let bytes = self.post(&self.config.endpoint, body.to_string().as_bytes())?;
        let v: Value = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::InvalidResponse(format!("embedding response: {e}")))?;
        let raw = v
            .get("embedding")
            .or_else(|| v.pointer("/data/0/embedding"))
            .cloned()
            .ok_or_else(|| GatewayError::InvalidResponse("no embedding in response".into()))?;
        let embedding: Vec<f64> =
            serde_json::from_value(raw).map_err(|e| GatewayError::InvalidResponse(format!("embedding values: {e}")))?;
        Ok(serde_json::to_vec(&EmbeddingPayload { embedding }).expect("serialize"))
    }
}

/// `choices[0].message.content` of a chat-completion response.
pub fn extract_chat_content(bytes: &[u8]) -> Result<String, GatewayError> {
    let v: Value =
        serde_json::from_slice(bytes).map_err(|e| GatewayError::InvalidResponse(format!("chat response: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::InvalidResponse("chat response has no choices[0].message.content".into()))
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, req: &ModelRequest) -> Result<Vec<u8>, GatewayError> {
        match req.role {
            r if r.is_text() => self.chat(req),
            ModelRole::CriticClassifier => {
                let feature = req
                    .feature
                    .as_ref()
                    .ok_or_else(|| GatewayError::InvalidRequest("missing feature".into()))?;
                let body = ClassifyRequest {
                    image: self.image_b64(req, 0)?,
                    feature: feature.display.clone(),
                };
                self.post(
                    &self.url(protocol::CLASSIFY_PATH),
                    &serde_json::to_vec(&body).expect("serialize"),
                )
            }
            ModelRole::CriticLister => {
                let body = SalientRequest {
                    image: self.image_b64(req, 0)?,
                };
                self.post(
                    &self.url(protocol::SALIENT_PATH),
                    &serde_json::to_vec(&body).expect("serialize"),
                )
            }
            _ => self.embedding(req),
        }
    }
}
