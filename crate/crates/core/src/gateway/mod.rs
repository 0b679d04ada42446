//! Uniform, cached access to every model role.

pub mod cache;
pub mod conformance;
pub mod http;
pub mod image;
pub mod mock;
pub mod protocol;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::exec::{self, ExecMode};
use crate::model::{
    canonicalize_feature, dedup_features, Feature, FeatureLabel, FeatureOrigin, ImageRef, MockManifest,
    HALLUCINATED_RATIONALE,
};
use crate::prompt::{parse_classification, parse_feature_list, ParseError, PromptText};

pub use cache::{Cache, CacheEntry, CacheError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    GeneratorLmm,
    ExtractorLlm,
    EditorLlm,
    VisibilityVlm,
    CriticClassifier,
    CriticLister,
    TextEmbedder,
    ImageEmbedder,
}

impl ModelRole {
    pub const ALL: [ModelRole; 8] = [
        ModelRole::GeneratorLmm,
        ModelRole::ExtractorLlm,
        ModelRole::EditorLlm,
        ModelRole::VisibilityVlm,
        ModelRole::CriticClassifier,
        ModelRole::CriticLister,
        ModelRole::TextEmbedder,
        ModelRole::ImageEmbedder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::GeneratorLmm => "generator_lmm",
            ModelRole::ExtractorLlm => "extractor_llm",
            ModelRole::EditorLlm => "editor_llm",
            ModelRole::VisibilityVlm => "visibility_vlm",
            ModelRole::CriticClassifier => "critic_classifier",
            ModelRole::CriticLister => "critic_lister",
            ModelRole::TextEmbedder => "text_embedder",
            ModelRole::ImageEmbedder => "image_embedder",
        }
    }

    pub fn is_text(self) -> bool {
        matches!(
            self,
            ModelRole::GeneratorLmm | ModelRole::ExtractorLlm | ModelRole::EditorLlm | ModelRole::VisibilityVlm
        )
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown model role {s:?}"))
    }
}

/// One model call. `input` carries raw text for the text embedder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRequest {
    pub role: ModelRole,
    pub prompt: Option<PromptText>,
    pub images: Vec<ImageRef>,
    pub feature: Option<Feature>,
    pub input: Option<String>,
    pub backend_id: String,
}

#[derive(Serialize)]
struct CanonicalImage<'a> {
    id: &'a str,
    uri: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<&'a MockManifest>,
}

#[derive(Serialize)]
struct CanonicalFeature<'a> {
    display: &'a str,
    key: &'a str,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    backend_id: &'a str,
    role: ModelRole,
    prompt: Option<&'a PromptText>,
    images: Vec<CanonicalImage<'a>>,
    feature: Option<CanonicalFeature<'a>>,
    input: Option<&'a str>,
}

impl ModelRequest {
    pub fn new(role: ModelRole) -> Self {
        Self {
            role,
            prompt: None,
            images: Vec::new(),
            feature: None,
            input: None,
            backend_id: String::new(),
        }
    }

    pub fn text(role: ModelRole, prompt: PromptText, images: Vec<ImageRef>) -> Self {
        Self {
            prompt: Some(prompt),
            images,
            ..Self::new(role)
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(format!("{}: {m}", self.role)));
        match self.role {
            r if r.is_text() && self.prompt.is_none() => bad("text roles require a prompt"),
            ModelRole::CriticClassifier if self.images.is_empty() || self.feature.is_none() => {
                bad("requires images and a feature")
            }
            ModelRole::CriticLister | ModelRole::ImageEmbedder if self.images.len() != 1 => {
                bad("requires exactly one image")
            }
            ModelRole::TextEmbedder if self.input.as_deref().is_none_or(|s| s.trim().is_empty()) => {
                bad("requires non-empty input")
            }
            _ => Ok(()),
        }
    }

    /// Byte-exact JSON used for cache keys and the `.req` echo.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let c = CanonicalRequest {
            backend_id: &self.backend_id,
            role: self.role,
            prompt: self.prompt.as_ref(),
            images: self
                .images
                .iter()
                .map(|i| CanonicalImage {
                    id: &i.id,
                    uri: &i.uri,
                    manifest: i.manifest.as_ref(),
                })
                .collect(),
            feature: self.feature.as_ref().map(|f| CanonicalFeature {
                display: &f.display,
                key: &f.key,
            }),
            input: self.input.as_deref(),
        };
        serde_json::to_vec(&c).expect("canonical request serializes")
    }

    pub fn cache_key(&self) -> String {
        cache::cache_key(&self.backend_id, self.role.as_str(), &self.canonical_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub label: FeatureLabel,
    pub rationale: String,
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalize `raw`; fails on empty, non-finite or zero vectors.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self, GatewayError> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidResponse("embedding is empty or non-finite".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GatewayError::InvalidResponse("embedding has zero norm".into()));
        }
        Ok(Self {
            values: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct EmbeddingPayload {
    pub embedding: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend error {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error(transparent)]
    CacheCorrupt(#[from] CacheError),
    #[error("no backend configured for role {0}")]
    NoBackend(ModelRole),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl GatewayError {
    fn retryable(&self) -> bool {
        match self {
            GatewayError::BackendUnavailable(_) => true,
            GatewayError::BackendError { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Anything that can answer a [`ModelRequest`] with raw payload bytes.
///
/// Payloads are normalized per role: UTF-8 text for text roles, protocol
/// JSON (or list/verdict text) for critic roles, `{"embedding":[...]}`
/// for embedders.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, req: &ModelRequest) -> Result<Vec<u8>, GatewayError>;
}

#[derive(Clone)]
struct Route {
    backend: Arc<dyn Backend>,
    max_retries: u32,
}

#[derive(Debug, Default)]
struct Counters {
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    backend_calls: AtomicU64,
    backend_failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub backend_calls: u64,
    pub backend_failures: u64,
}

pub struct Gateway {
    routes: HashMap<ModelRole, Route>,
    cache: Cache,
    counters: Counters,
    hallucinated_rationale: String,
    exec: ExecMode,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut roles: Vec<_> = self.routes.iter().map(|(r, b)| (r.as_str(), b.backend.id())).collect();
        roles.sort();
        f.debug_struct("Gateway")
            .field("routes", &roles)
            .field("cache", &self.cache)
            .finish()
    }
}

impl Gateway {
    pub fn new(cache: Cache) -> Self {
        Self {
            routes: HashMap::new(),
            cache,
            counters: Counters::default(),
            hallucinated_rationale: HALLUCINATED_RATIONALE.to_owned(),
            exec: ExecMode::default(),
        }
    }

    pub fn route(mut self, role: ModelRole, backend: Arc<dyn Backend>, max_retries: u32) -> Self {
        self.routes.insert(role, Route { backend, max_retries });
        self
    }

    /// Route every role to one backend.
    pub fn route_all(mut self, backend: Arc<dyn Backend>, max_retries: u32) -> Self {
        for role in ModelRole::ALL {
            self = self.route(role, backend.clone(), max_retries);
        }
        self
    }

    pub fn with_hallucinated_rationale(mut self, rationale: impl Into<String>) -> Self {
        self.hallucinated_rationale = rationale.into();
        self
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn has_route(&self, role: ModelRole) -> bool {
        self.routes.contains_key(&role)
    }

    pub fn backend_id(&self, role: ModelRole) -> Option<&str> {
        self.routes.get(&role).map(|r| r.backend.id())
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn hallucinated_rationale(&self) -> &str {
        &self.hallucinated_rationale
    }

    pub fn stats(&self) -> GatewayStats {
        let c = &self.counters;
        GatewayStats {
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            cache_misses: c.cache_misses.load(Ordering::Relaxed),
            backend_calls: c.backend_calls.load(Ordering::Relaxed),
            backend_failures: c.backend_failures.load(Ordering::Relaxed),
        }
    }

    /// Fill in the backend id, then serve from cache or the backend.
    /// Returns payload bytes and the cache key of the call.
    pub fn call(&self, mut req: ModelRequest) -> Result<(Vec<u8>, String), GatewayError> {
        let route = self.routes.get(&req.role).ok_or(GatewayError::NoBackend(req.role))?;
        req.backend_id = route.backend.id().to_owned();
        req.validate()?;
        let canonical = req.canonical_bytes();
        let key = cache::cache_key(&req.backend_id, req.role.as_str(), &canonical);
        if let Some(bytes) = self.cache.get(&key, &canonical)? {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok((bytes, key));
        }
        self.counters.cache_misses.fetch_add(1, Ordering::Relaxed);
        let mut attempt = 0;
        let bytes = loop {
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            match route.backend.call(&req) {
                Ok(b) => break b,
                Err(e) => {
                    self.counters.backend_failures.fetch_add(1, Ordering::Relaxed);
                    if attempt < route.max_retries && e.retryable() {
                        attempt += 1;
                        log::warn!("{} call failed ({e}); retry {attempt}", req.role);
                        continue;
                    }
                    return Err(e);
                }
            }
        };
        self.cache.put(&key, &canonical, &bytes)?;
        Ok((bytes, key))
    }

    pub fn complete(&self, req: ModelRequest) -> Result<String, GatewayError> {
        self.complete_traced(req).map(|(s, _)| s)
    }

    pub fn complete_traced(&self, req: ModelRequest) -> Result<(String, String), GatewayError> {
        if !req.role.is_text() {
            return Err(GatewayError::InvalidRequest(format!("{} is not a text role", req.role)));
        }
        let (bytes, key) = self.call(req)?;
        let text = String::from_utf8(bytes).map_err(|_| {
            GatewayError::CacheCorrupt(CacheError::Corrupt {
                key: key.clone(),
                reason: "response is not UTF-8".into(),
            })
        })?;
        Ok((text, key))
    }

    fn classify_one(&self, image: &ImageRef, feature: &Feature) -> Result<CriticVerdict, GatewayError> {
        let req = ModelRequest {
            images: vec![image.clone()],
            feature: Some(feature.clone()),
            ..ModelRequest::new(ModelRole::CriticClassifier)
        };
        let (bytes, _) = self.call(req)?;
        let (label, rationale) = if looks_like_json(&bytes) {
            let r = protocol::parse_classify_response(&bytes)?;
            (r.label, r.rationale)
        } else {
            parse_classification(&String::from_utf8_lossy(&bytes))?
        };
        let rationale = if label == FeatureLabel::Hallucinated {
            self.hallucinated_rationale.clone()
        } else {
            rationale
        };
        Ok(CriticVerdict { label, rationale })
    }

    /// Per-image verdicts joined by salient > non-salient > hallucinated.
    /// Ties keep the lexicographically smallest rationale so the result
    /// does not depend on image order.
    pub fn classify_feature(&self, images: &[ImageRef], feature: &Feature) -> Result<CriticVerdict, GatewayError> {
        if images.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "classify_feature needs at least one image".into(),
            ));
        }
        let verdicts = exec::map(self.exec, images, |img| self.classify_one(img, feature));
        let mut best: Option<CriticVerdict> = None;
        for v in verdicts {
            let v = v?;
            best = Some(match best {
                None => v,
                Some(b) if (v.label, std::cmp::Reverse(&v.rationale)) > (b.label, std::cmp::Reverse(&b.rationale)) => v,
                Some(b) => b,
            });
        }
        Ok(best.expect("at least one image"))
    }

    pub fn list_salient(&self, image: &ImageRef) -> Result<Vec<Feature>, GatewayError> {
        let req = ModelRequest {
            images: vec![image.clone()],
            ..ModelRequest::new(ModelRole::CriticLister)
        };
        let (bytes, _) = self.call(req)?;
        let features = if looks_like_json(&bytes) {
            protocol::parse_salient_response(&bytes)?
                .features
                .iter()
                .filter_map(|f| canonicalize_feature(f, FeatureOrigin::CriticList).ok())
                .collect()
        } else {
            parse_feature_list(&String::from_utf8_lossy(&bytes), FeatureOrigin::CriticList)?
        };
        Ok(dedup_features(features))
    }

    fn embed(&self, req: ModelRequest) -> Result<EmbeddingVector, GatewayError> {
        let (bytes, _) = self.call(req)?;
        let payload: EmbeddingPayload = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::InvalidResponse(format!("embedding payload: {e}")))?;
        EmbeddingVector::from_raw(payload.embedding)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.embed(ModelRequest {
            input: Some(text.to_owned()),
            ..ModelRequest::new(ModelRole::TextEmbedder)
        })
    }

    pub fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        self.embed(ModelRequest {
            images: vec![image.clone()],
            ..ModelRequest::new(ModelRole::ImageEmbedder)
        })
    }
}

fn looks_like_json(bytes: &[u8]) -> bool {
    bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{')
}

#[cfg(test)]
mod tests {
    use super::mock::{FnBackend, MockSettings, MockWorld};
    use super::*;
    use crate::model::MockManifest;
    use crate::prompt::{bindings, TemplateId, TemplateSet};

    fn world() -> Arc<MockWorld> {
        Arc::new(MockWorld::new(
            Arc::new(TemplateSet::builtin()),
            MockSettings::default(),
            ["picket fence", "verandah", "swimming pool"],
        ))
    }

    fn image(id: &str, visible: &[&str], salient: &[&str]) -> ImageRef {
        ImageRef::new(id, format!("mock:{id}")).with_manifest(MockManifest::new(visible, salient).unwrap())
    }

    fn feature(s: &str) -> Feature {
        canonicalize_feature(s, FeatureOrigin::GeneratedText).unwrap()
    }

    fn extract_req(sentence: &str) -> ModelRequest {
        let p = TemplateSet::builtin()
            .render(TemplateId::ExtractFeatures, &bindings([("sentence", sentence)]))
            .unwrap();
        ModelRequest::text(ModelRole::ExtractorLlm, p, vec![])
    }

    #[test]
    fn second_identical_request_is_a_cache_hit() {
        let gw = Gateway::new(Cache::in_memory()).route_all(world(), 0);
        let a = gw.complete(extract_req("It has a picket fence.")).unwrap();
        let b = gw.complete(extract_req("It has a picket fence.")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, "1. picket fence");
        let s = gw.stats();
        assert_eq!((s.backend_calls, s.cache_hits, s.cache_misses), (1, 1, 1));
    }

    #[test]
    fn scripted_backend_string_returned() {
        let backend = FnBackend::new("scripted", |_req: &ModelRequest| Ok(b"scripted answer".to_vec()));
        let gw = Gateway::new(Cache::in_memory()).route(ModelRole::ExtractorLlm, Arc::new(backend), 0);
        assert_eq!(gw.complete(extract_req("x")).unwrap(), "scripted answer");
    }

    #[test]
    fn backend_down_without_cache_entry() {
        let down = FnBackend::new("down", |_req: &ModelRequest| {
            Err(GatewayError::BackendUnavailable("connection refused".into()))
        });
        let gw = Gateway::new(Cache::in_memory()).route(ModelRole::ExtractorLlm, Arc::new(down), 1);
        assert!(matches!(
            gw.complete(extract_req("x")),
            Err(GatewayError::BackendUnavailable(_))
        ));
        assert_eq!(gw.stats().backend_calls, 2);
    }

    #[test]
    fn backend_error_not_retried_on_4xx() {
        let bad = FnBackend::new("bad", |_req: &ModelRequest| {
            Err(GatewayError::BackendError {
                status: 400,
                body: "no".into(),
            })
        });
        let gw = Gateway::new(Cache::in_memory()).route(ModelRole::ExtractorLlm, Arc::new(bad), 3);
        assert!(matches!(
            gw.complete(extract_req("x")),
            Err(GatewayError::BackendError { status: 400, .. })
        ));
        assert_eq!(gw.stats().backend_calls, 1);
    }

    #[test]
    fn text_role_needs_prompt() {
        let gw = Gateway::new(Cache::in_memory()).route_all(world(), 0);
        let req = ModelRequest::new(ModelRole::EditorLlm);
        assert!(matches!(gw.complete(req), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(
            Gateway::new(Cache::in_memory()).complete(extract_req("x")),
            Err(GatewayError::NoBackend(ModelRole::ExtractorLlm))
        ));
    }

    #[test]
    fn classify_precedence() {
        let gw = Gateway::new(Cache::in_memory()).route_all(world(), 0);
        let a = image("a", &["picket fence", "verandah"], &["picket fence"]);
        let b = image("b", &[], &[]);
        assert_eq!(
            gw.classify_feature(&[b.clone(), a.clone()], &feature("Picket Fence"))
                .unwrap()
                .label,
            FeatureLabel::Salient
        );
        let v = gw
            .classify_feature(&[a.clone(), b.clone()], &feature("verandah"))
            .unwrap();
        assert_eq!(v.label, FeatureLabel::NonSalient);
        let v = gw.classify_feature(&[a, b], &feature("swimming pool")).unwrap();
        assert_eq!(v.label, FeatureLabel::Hallucinated);
        assert_eq!(v.rationale, HALLUCINATED_RATIONALE);
    }

    #[test]
    fn classify_is_order_independent() {
        let backend = FnBackend::new("r", |req: &ModelRequest| {
            let body = match req.images[0].id.as_str() {
                "a" => r#"{"label":"non-salient","rationale":"from a"}"#,
                "b" => r#"{"label":"non-salient","rationale":"from b"}"#,
                _ => r#"{"label":"hallucinated","rationale":"nope"}"#,
            };
            Ok(body.as_bytes().to_vec())
        });
        let gw = Gateway::new(Cache::in_memory()).route(ModelRole::CriticClassifier, Arc::new(backend), 0);
        let imgs = [
            ImageRef::new("a", "a"),
            ImageRef::new("b", "b"),
            ImageRef::new("c", "c"),
        ];
        let f = feature("porch");
        let forward = gw.classify_feature(&imgs, &f).unwrap();
        let mut rev = imgs.to_vec();
        rev.reverse();
        assert_eq!(forward, gw.classify_feature(&rev, &f).unwrap());
        assert_eq!(forward.rationale, "from a");
    }

    #[test]
    fn list_salient_manifest_order() {
        let gw = Gateway::new(Cache::in_memory()).route_all(world(), 0);
        let img = image("a", &["verandah", "picket fence"], &["picket fence", "verandah"]);
        let keys: Vec<_> = gw.list_salient(&img).unwrap().into_iter().map(|f| f.key).collect();
        assert_eq!(keys, ["picket fence", "verandah"]);
        assert!(gw.list_salient(&image("b", &["verandah"], &[])).unwrap().is_empty());
    }

    #[test]
    fn list_salient_text_grammar() {
        let backend = FnBackend::new("t", |_req: &ModelRequest| Ok(b"[white porch]; [garden]".to_vec()));
        let gw = Gateway::new(Cache::in_memory()).route(ModelRole::CriticLister, Arc::new(backend), 0);
        assert_eq!(gw.list_salient(&ImageRef::new("a", "a")).unwrap().len(), 2);
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let gw = Gateway::new(Cache::in_memory()).route_all(world(), 0);
        let a = gw.embed_text("a sunny porch").unwrap();
        let b = gw.embed_text("a sunny porch").unwrap();
        assert_eq!(a, b);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-6);
        let i = gw.embed_image(&ImageRef::new("x", "mock:x")).unwrap();
        let norm = i.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(EmbeddingVector::from_raw(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn canonical_bytes_are_frozen() {
        let mut req = extract_req("x");
        req.backend_id = "mock".into();
        let bytes = String::from_utf8(req.canonical_bytes()).unwrap();
        assert!(bytes.starts_with(r#"{"backend_id":"mock","role":"extractor_llm","prompt":{"text":"#));
        assert!(bytes.ends_with(r#""images":[],"feature":null,"input":null}"#));
    }
}
