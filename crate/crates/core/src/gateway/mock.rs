//! Deterministic backends.
//!
//! [`MockWorld`] answers every role from image manifests and a fixed
//! feature vocabulary, which makes whole pipeline runs checkable against
//! brute-force oracles. It reads prompts by inverting the template that
//! produced them, so it tracks whatever template set it is given.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::protocol::{ClassifyResponse, SalientResponse};
use super::{Backend, EmbeddingPayload, GatewayError, ModelRequest, ModelRole};
use crate::matching::{parse_linearized, structured_value_keys, text_aligned_any};
use crate::model::{canonical_key, FeatureLabel, FeatureOrigin, ImageRef, MockManifest, StructuredData};
use crate::prompt::{format_numbered, format_sections, parse_feature_list_or_empty, TemplateId, TemplateSet};
use crate::text::split_sentences;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    /// Features the mock generator may invent for an image.
    pub hallucination_pool: Vec<String>,
    pub hallucinations_per_image: usize,
    /// Drop a salient feature from an image's key features when its hash
    /// is divisible by this; 0 disables omission.
    pub omit_salient_modulo: u64,
    /// Extra phrases the mock extractor recognizes.
    pub extra_vocabulary: Vec<String>,
    /// Answer 400 to visibility checks carrying more than one image.
    pub reject_multi_image: bool,
    /// Rationales come back two sentences long.
    pub verbose_rationales: bool,
    pub embedding_dim: usize,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            hallucination_pool: Vec::new(),
            hallucinations_per_image: 0,
            omit_salient_modulo: 0,
            extra_vocabulary: Vec::new(),
            reject_multi_image: false,
            verbose_rationales: false,
            embedding_dim: 256,
        }
    }
}

pub const MOCK_BACKEND_ID: &str = "mock-world";

pub struct MockWorld {
    id: String,
    templates: Arc<TemplateSet>,
    settings: MockSettings,
    /// Canonical phrases, longest first.
    vocabulary: Vec<String>,
}

fn hash64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn bad_request(msg: impl Into<String>) -> GatewayError {
    GatewayError::BackendError {
        status: 400,
        body: msg.into(),
    }
}

fn manifest(img: &ImageRef) -> MockManifest {
    img.manifest.clone().unwrap_or_default()
}

impl MockWorld {
    pub fn new<I, S>(templates: Arc<TemplateSet>, settings: MockSettings, vocabulary: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut vocab: Vec<String> = vocabulary
            .into_iter()
            .map(|s| canonical_key(s.as_ref()))
            .chain(settings.hallucination_pool.iter().map(|s| canonical_key(s)))
            .chain(settings.extra_vocabulary.iter().map(|s| canonical_key(s)))
            .filter(|k| !k.is_empty() && seen.insert(k.clone()))
            .collect();
        vocab.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Self {
            id: MOCK_BACKEND_ID.to_owned(),
            templates,
            settings,
            vocabulary: vocab,
        }
    }

    /// Vocabulary taken from every manifest in `records`.
    pub fn from_records(
        templates: Arc<TemplateSet>,
        settings: MockSettings,
        records: &[crate::model::MixedModalRecord],
    ) -> Self {
        let vocab: Vec<String> = records
            .iter()
            .flat_map(|r| r.images.iter())
            .filter_map(|i| i.manifest.as_ref())
            .flat_map(|m| m.visible.iter().cloned())
            .collect();
        Self::new(templates, settings, vocab)
    }

    pub fn settings(&self) -> &MockSettings {
        &self.settings
    }

    /// Vocabulary phrases found in `text`, in order of appearance,
    /// longest match first, non-overlapping, at word boundaries.
    pub fn scan(&self, text: &str) -> Vec<String> {
        let hay = canonical_key(text);
        let boundary = |i: usize| hay[..i].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let boundary_after = |j: usize| hay[j..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        let mut hits: Vec<(usize, usize, &str)> = Vec::new();
        for phrase in &self.vocabulary {
            for (start, _) in hay.match_indices(phrase.as_str()) {
                let end = start + phrase.len();
                if boundary(start) && boundary_after(end) {
                    hits.push((start, end, phrase));
                }
            }
        }
        hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut cursor = 0;
        for (start, end, phrase) in hits {
            if start < cursor {
                continue;
            }
            cursor = end;
            if seen.insert(phrase) {
                out.push(phrase.to_owned());
            }
        }
        out
    }

    fn key_features(&self, img: &ImageRef) -> Vec<String> {
        let m = manifest(img);
        let mut out: Vec<String> = m
            .visible
            .iter()
            .filter(|k| {
                let omit = self.settings.omit_salient_modulo > 0
                    && m.is_salient(k)
                    && hash64(&["omit", &img.id, k]).is_multiple_of(self.settings.omit_salient_modulo);
                !omit
            })
            .cloned()
            .collect();
        let mut pool: Vec<String> = self
            .settings
            .hallucination_pool
            .iter()
            .map(|p| canonical_key(p))
            .filter(|p| !m.is_visible(p))
            .collect();
        pool.sort_by_key(|p| hash64(&["hallucinate", &img.id, p]));
        out.extend(pool.into_iter().take(self.settings.hallucinations_per_image));
        out
    }

    fn structured_lines(binding: &str) -> Vec<String> {
        binding
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.eq_ignore_ascii_case("none."))
            .map(str::to_owned)
            .collect()
    }

    fn structured_values(binding: &str) -> Vec<String> {
        parse_linearized(binding)
            .map(|d| structured_value_keys(&d))
            .unwrap_or_default()
    }

    fn describe_structured(binding: &str) -> Vec<String> {
        match parse_linearized(binding) {
            Some(StructuredData::Kg(triples)) => triples
                .iter()
                .map(|t| format!("The {} {} {}.", t.subject, t.relation, t.object))
                .collect(),
            Some(StructuredData::Table(pairs)) => pairs
                .iter()
                .map(|p| format!("The {} is {}.", p.attribute, p.value))
                .collect(),
            None => Vec::new(),
        }
    }

    fn list(binding: &str) -> Vec<String> {
        parse_feature_list_or_empty(binding, FeatureOrigin::GeneratedText)
            .into_iter()
            .map(|f| f.display)
            .collect()
    }

    fn answer_text(&self, req: &ModelRequest) -> Result<String, GatewayError> {
        let prompt = req.prompt.as_ref().ok_or_else(|| bad_request("missing prompt"))?;
        let template = self
            .templates
            .get(prompt.template)
            .map_err(|e| bad_request(e.to_string()))?;
        let b: BTreeMap<String, String> = template
            .extract_bindings(&prompt.text)
            .ok_or_else(|| bad_request(format!("mock cannot read {} prompt", prompt.template)))?;
        let get = |k: &str| b.get(k).map(String::as_str).unwrap_or("");
        let answer = match prompt.template {
            TemplateId::ImageKeyFeatures => {
                let [img] = req.images.as_slice() else {
                    return Err(bad_request("key features take exactly one image"));
                };
                format_numbered(&self.key_features(img))
            }
            TemplateId::DraftGeneration => {
                let mut sentences = Self::describe_structured(get("structured"));
                sentences.extend(
                    Self::list(get("key_features"))
                        .iter()
                        .map(|f| format!("It features {f}.")),
                );
                if sentences.is_empty() {
                    sentences.push("A property is available.".into());
                }
                sentences.join(" ")
            }
            TemplateId::ExtractFeatures => {
                let lines = Self::structured_lines(get("structured"));
                let found: Vec<String> = self
                    .scan(get("sentence"))
                    .into_iter()
                    .filter(|k| !text_aligned_any(k, &lines))
                    .collect();
                format_numbered(&found)
            }
            TemplateId::VisibilityCheck => {
                if self.settings.reject_multi_image && req.images.len() > 1 {
                    return Err(bad_request("multiple images not supported"));
                }
                let manifests: Vec<MockManifest> = req.images.iter().map(manifest).collect();
                let (vis, not): (Vec<String>, Vec<String>) = Self::list(get("features"))
                    .into_iter()
                    .partition(|f| manifests.iter().any(|m| m.is_visible(&canonical_key(f))));
                format_sections("VISIBLE", &vis, "NOT VISIBLE", &not)
            }
            TemplateId::HallucinationFilter => {
                let lines = Self::structured_lines(get("structured"));
                let unsupported: Vec<String> = Self::list(get("features"))
                    .into_iter()
                    .filter(|f| !text_aligned_any(f, &lines))
                    .collect();
                format_numbered(&unsupported)
            }
            TemplateId::SaliencyCompare => {
                let gt: HashSet<String> = Self::list(get("ground_truth"))
                    .iter()
                    .map(|f| canonical_key(f))
                    .collect();
                let values = Self::structured_values(get("structured"));
                let (sal, not): (Vec<String>, Vec<String>) = Self::list(get("generated")).into_iter().partition(|f| {
                    let k = canonical_key(f);
                    gt.contains(&k) || values.contains(&k)
                });
                format_sections("SALIENT", &sal, "NOT SALIENT", &not)
            }
            TemplateId::RationaleGen => {
                let feature = get("feature");
                let label: FeatureLabel = get("label").parse().map_err(bad_request)?;
                let mut s = match label {
                    FeatureLabel::Salient => format!("The {feature} is an attractive feature that buyers look for."),
                    FeatureLabel::NonSalient => {
                        format!("The {feature} is visible but adds little advertising value.")
                    }
                    FeatureLabel::Hallucinated => crate::model::HALLUCINATED_RATIONALE.to_owned(),
                };
                if self.settings.verbose_rationales {
                    s.push_str(" It also appears in many listings.");
                }
                s
            }
            TemplateId::PostEdit => {
                let remove: HashSet<String> = Self::list(get("remove")).iter().map(|f| canonical_key(f)).collect();
                let mut kept: Vec<String> = split_sentences(get("text"))
                    .into_iter()
                    .filter(|s| !self.scan(s).iter().any(|k| remove.contains(k)))
                    .collect();
                kept.extend(Self::list(get("add")).iter().map(|f| format!("It also features {f}.")));
                if kept.is_empty() {
                    kept.push("This property is available for viewing.".into());
                }
                kept.join(" ")
            }
            TemplateId::GtFaithfulFeatures => {
                let lines = Self::structured_lines(get("structured"));
                let not_visible: HashSet<String> = Self::list(get("not_visible"))
                    .iter()
                    .map(|f| canonical_key(f))
                    .collect();
                let faithful: Vec<String> = Self::list(get("features"))
                    .into_iter()
                    .filter(|f| {
                        let k = canonical_key(f);
                        !not_visible.contains(&k) || text_aligned_any(&k, &lines)
                    })
                    .collect();
                format_numbered(&faithful)
            }
            TemplateId::GtParagraph => {
                let features = Self::list(get("features"));
                if features.is_empty() {
                    "A well-presented property.".to_owned()
                } else {
                    features
                        .iter()
                        .enumerate()
                        .map(|(i, f)| match i % 3 {
                            0 => format!("The home offers {f}."),
                            1 => format!("It also features {f}."),
                            _ => format!("Buyers will appreciate the {f}."),
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                }
            }
        };
        Ok(answer)
    }

    fn embedding(&self, tag: &str, input: &str) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        h.update([0]);
        h.update(input.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let dim = self.settings.embedding_dim.max(1);
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let embedding = raw.into_iter().map(|v| v / norm).collect();
        serde_json::to_vec(&EmbeddingPayload { embedding }).expect("serialize")
    }
}

impl Backend for MockWorld {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, req: &ModelRequest) -> Result<Vec<u8>, GatewayError> {
        match req.role {
            r if r.is_text() => self.answer_text(req).map(String::into_bytes),
            ModelRole::CriticClassifier => {
                let img = req.images.first().ok_or_else(|| bad_request("missing image"))?;
                let feature = req.feature.as_ref().ok_or_else(|| bad_request("missing feature"))?;
                Ok(serde_json::to_vec(&mock_classify(&manifest(img), &feature.display)).expect("serialize"))
            }
            ModelRole::CriticLister => {
                let img = req.images.first().ok_or_else(|| bad_request("missing image"))?;
                Ok(serde_json::to_vec(&mock_salient(&manifest(img))).expect("serialize"))
            }
            ModelRole::TextEmbedder => Ok(self.embedding("text", req.input.as_deref().unwrap_or(""))),
            _ => {
                let img = req.images.first().ok_or_else(|| bad_request("missing image"))?;
                Ok(self.embedding("image", &img.uri))
            }
        }
    }
}

/// Critic verdict the mock world gives for one image.
pub fn mock_classify(m: &MockManifest, feature: &str) -> ClassifyResponse {
    let key = canonical_key(feature);
    let display = feature.split_whitespace().collect::<Vec<_>>().join(" ");
    if m.is_salient(&key) {
        ClassifyResponse {
            label: FeatureLabel::Salient,
            rationale: format!("The {display} is a strong selling point in this image."),
        }
    } else if m.is_visible(&key) {
        ClassifyResponse {
            label: FeatureLabel::NonSalient,
            rationale: format!("The {display} is visible but adds little advertising value."),
        }
    } else {
        ClassifyResponse {
            label: FeatureLabel::Hallucinated,
            rationale: crate::model::HALLUCINATED_RATIONALE.to_owned(),
        }
    }
}

pub fn mock_salient(m: &MockManifest) -> SalientResponse {
    SalientResponse {
        features: m.salient.clone(),
    }
}

type Handler = dyn Fn(&ModelRequest) -> Result<Vec<u8>, GatewayError> + Send + Sync;

/// Backend driven by a closure; for scripted fixtures in tests.
pub struct FnBackend {
    id: String,
    handler: Box<Handler>,
}

impl FnBackend {
    pub fn new<F>(id: impl Into<String>, handler: F) -> Self
    where
        F: Fn(&ModelRequest) -> Result<Vec<u8>, GatewayError> + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            handler: Box::new(handler),
        }
    }
}

impl Backend for FnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, req: &ModelRequest) -> Result<Vec<u8>, GatewayError> {
        (self.handler)(req)
    }
}
