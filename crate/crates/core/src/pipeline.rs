//! Shared context for the pipeline stages.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::exec::ExecMode;
use crate::gateway::{Gateway, GatewayError, ModelRequest, ModelRole};
use crate::matching::text_aligned;
use crate::model::{canonical_key, Feature, FeatureOrigin, ImageRef, ModelError};
use crate::prompt::{parse_feature_list_or_empty, ParseError, TemplateError, TemplateId, TemplateSet};

/// How alignment with structured data and saliency matches are judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    /// Deterministic matcher: substring / stem subset, plus embedding
    /// cosine when a text embedder is routed.
    #[default]
    Fallback,
    /// Ask the extractor model with the judgment prompts.
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub tau_align: f64,
    pub tau_sal: f64,
    pub alignment: AlignmentMode,
    pub exec: ExecMode,
    pub clip_weight: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            tau_align: 0.8,
            tau_sal: 0.8,
            alignment: AlignmentMode::Fallback,
            exec: ExecMode::Parallel,
            clip_weight: 1.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("text is empty")]
    EmptyText,
    #[error("model returned an empty generation")]
    EmptyGeneration,
    #[error("record {0} has no images")]
    NoImages(String),
    #[error("{failed} of {total} records failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("cancelled")]
    Cancelled,
    #[error("{0}")]
    Invalid(String),
}

pub struct Pipeline {
    pub gateway: Gateway,
    pub templates: Arc<TemplateSet>,
    pub settings: PipelineSettings,
    cancel: Arc<AtomicBool>,
}

impl Pipeline {
    pub fn new(gateway: Gateway, templates: Arc<TemplateSet>, settings: PipelineSettings) -> Self {
        let gateway = gateway.with_exec(settings.exec);
        Self {
            gateway,
            templates,
            settings,
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Flag that stops work at the next record boundary once set.
    pub fn cancel_flag(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    pub fn check_cancelled(&self) -> Result<(), PipelineError> {
        if self.cancel.load(Ordering::SeqCst) {
            Err(PipelineError::Cancelled)
        } else {
            Ok(())
        }
    }

    pub fn exec(&self) -> ExecMode {
        self.settings.exec
    }

    /// Render `id` and send it to `role`; returns the answer and its cache key.
    pub fn ask(
        &self,
        role: ModelRole,
        id: TemplateId,
        bindings: &BTreeMap<String, String>,
        images: &[ImageRef],
    ) -> Result<(String, String), PipelineError> {
        let prompt = self.templates.render(id, bindings)?;
        Ok(self
            .gateway
            .complete_traced(ModelRequest::text(role, prompt, images.to_vec()))?)
    }

    pub fn ask_list(
        &self,
        role: ModelRole,
        id: TemplateId,
        bindings: &BTreeMap<String, String>,
        images: &[ImageRef],
        origin: FeatureOrigin,
    ) -> Result<Vec<Feature>, PipelineError> {
        let (answer, _) = self.ask(role, id, bindings, images)?;
        Ok(parse_feature_list_or_empty(&answer, origin))
    }

    fn has_embedder(&self) -> bool {
        self.gateway.has_route(ModelRole::TextEmbedder)
    }

    fn cosine_at_least(&self, a: &str, b: &str, tau: f64) -> Result<bool, PipelineError> {
        let ea = self.gateway.embed_text(a)?;
        let eb = self.gateway.embed_text(b)?;
        Ok(ea.cosine(&eb) >= tau)
    }

    /// Deterministic alignment of a feature with linearized lines.
    pub fn aligned(&self, key: &str, lines: &[String]) -> Result<bool, PipelineError> {
        if lines.iter().any(|l| text_aligned(key, l)) {
            return Ok(true);
        }
        if self.has_embedder() {
            for l in lines {
                if self.cosine_at_least(key, l, self.settings.tau_align)? {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Saliency match: key equality, or cosine ≥ τ_sal with an embedder.
    pub fn sal_match<S: AsRef<str>>(&self, key: &str, targets: &[S]) -> Result<bool, PipelineError> {
        let key = canonical_key(key);
        if targets.iter().any(|t| canonical_key(t.as_ref()) == key) {
            return Ok(true);
        }
        if self.has_embedder() {
            for t in targets {
                if self.cosine_at_least(&key, &canonical_key(t.as_ref()), self.settings.tau_sal)? {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}
