use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("missing binding {0:?}")]
    MissingBinding(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {id}: {reason}")]
    Malformed { id: TemplateId, reason: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ImageKeyFeatures,
    DraftGeneration,
    ExtractFeatures,
    VisibilityCheck,
    HallucinationFilter,
    SaliencyCompare,
    RationaleGen,
    PostEdit,
    GtFaithfulFeatures,
    GtParagraph,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::ImageKeyFeatures,
        TemplateId::DraftGeneration,
        TemplateId::ExtractFeatures,
        TemplateId::VisibilityCheck,
        TemplateId::HallucinationFilter,
        TemplateId::SaliencyCompare,
        TemplateId::RationaleGen,
        TemplateId::PostEdit,
        TemplateId::GtFaithfulFeatures,
        TemplateId::GtParagraph,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ImageKeyFeatures => "image_key_features",
            TemplateId::DraftGeneration => "draft_generation",
            TemplateId::ExtractFeatures => "extract_features",
            TemplateId::VisibilityCheck => "visibility_check",
            TemplateId::HallucinationFilter => "hallucination_filter",
            TemplateId::SaliencyCompare => "saliency_compare",
            TemplateId::RationaleGen => "rationale_gen",
            TemplateId::PostEdit => "post_edit",
            TemplateId::GtFaithfulFeatures => "gt_faithful_features",
            TemplateId::GtParagraph => "gt_paragraph",
        }
    }

    /// Placeholder names the pipeline binds for this template.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::ImageKeyFeatures => &[],
            TemplateId::DraftGeneration => &["structured", "key_features"],
            TemplateId::ExtractFeatures => &["sentence", "structured"],
            TemplateId::VisibilityCheck => &["features"],
            TemplateId::HallucinationFilter => &["structured", "features"],
            TemplateId::SaliencyCompare => &["generated", "ground_truth", "structured"],
            TemplateId::RationaleGen => &["feature", "label", "hint"],
            TemplateId::PostEdit => &["text", "remove", "add"],
            TemplateId::GtFaithfulFeatures => &["features", "not_visible", "structured"],
            TemplateId::GtParagraph => &["features"],
        }
    }

    fn default_source(self) -> &'static str {
        match self {
            TemplateId::ImageKeyFeatures => include_str!("../../templates/image_key_features.prompt"),
            TemplateId::DraftGeneration => include_str!("../../templates/draft_generation.prompt"),
            TemplateId::ExtractFeatures => include_str!("../../templates/extract_features.prompt"),
            TemplateId::VisibilityCheck => include_str!("../../templates/visibility_check.prompt"),
            TemplateId::HallucinationFilter => include_str!("../../templates/hallucination_filter.prompt"),
            TemplateId::SaliencyCompare => include_str!("../../templates/saliency_compare.prompt"),
            TemplateId::RationaleGen => include_str!("../../templates/rationale_gen.prompt"),
            TemplateId::PostEdit => include_str!("../../templates/post_edit.prompt"),
            TemplateId::GtFaithfulFeatures => include_str!("../../templates/gt_faithful_features.prompt"),
            TemplateId::GtParagraph => include_str!("../../templates/gt_paragraph.prompt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownTemplate(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot { name: String, optional: bool },
}

/// A parsed template: literals interleaved with `{{name}}` slots.
/// `{{name?}}` marks a slot that renders empty when unbound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    id: TemplateId,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(id: TemplateId, source: &str) -> Result<Self, TemplateError> {
        let malformed = |reason: String| TemplateError::Malformed { id, reason };
        let mut segments = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_owned()));
            }
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or_else(|| malformed("unterminated placeholder".into()))?;
            let raw = after[..close].trim();
            let (name, optional) = match raw.strip_suffix('?') {
                Some(n) => (n, true),
                None => (raw, false),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(malformed(format!("bad placeholder name {raw:?}")));
            }
            if matches!(segments.last(), Some(Segment::Slot { .. })) {
                return Err(malformed(format!("placeholder {name:?} directly follows another")));
            }
            segments.push(Segment::Slot {
                name: name.to_owned(),
                optional,
            });
            rest = &after[close + 2..];
        }
        if rest.contains("}}") {
            return Err(malformed("stray \"}}\"".into()));
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_owned()));
        }
        let template = Self { id, segments };
        let found: BTreeSet<&str> = template.slot_names().collect();
        let expected: BTreeSet<&str> = id.placeholders().iter().copied().collect();
        if let Some(extra) = found.difference(&expected).next() {
            return Err(malformed(format!("placeholder {extra:?} is never bound")));
        }
        Ok(template)
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot { name, .. } => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    /// Names that must be bound for rendering.
    pub fn required(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot { name, optional: false } if seen.insert(name.as_str()) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<PromptText, TemplateError> {
        let mut text = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => text.push_str(l),
                Segment::Slot { name, optional } => match bindings.get(name) {
                    Some(v) => text.push_str(v),
                    None if *optional => {}
                    None => return Err(TemplateError::MissingBinding(name.clone())),
                },
            }
        }
        Ok(PromptText {
            text,
            template: self.id,
            bindings_digest: bindings_digest(bindings),
        })
    }

    /// Recover slot values from rendered text. Used by the mock backend.
    pub fn extract_bindings(&self, rendered: &str) -> Option<BTreeMap<String, String>> {
        let mut out: BTreeMap<String, String> = BTreeMap::new();
        let mut pos = 0;
        let mut pending: Option<&str> = None;
        let n = self.segments.len();
        for (i, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Literal(lit) => {
                    let start = match pending.take() {
                        None => {
                            if !rendered[pos..].starts_with(lit.as_str()) {
                                return None;
                            }
                            pos
                        }
                        Some(name) => {
                            let found = if i + 1 == n {
                                if !rendered.ends_with(lit.as_str()) || rendered.len() - lit.len() < pos {
                                    return None;
                                }
                                rendered.len() - lit.len()
                            } else {
                                pos + rendered[pos..].find(lit.as_str())?
                            };
                            let value = &rendered[pos..found];
                            if let Some(prev) = out.get(name) {
                                if prev != value {
                                    return None;
                                }
                            }
                            out.insert(name.to_owned(), value.to_owned());
                            found
                        }
                    };
                    pos = start + lit.len();
                }
                Segment::Slot { name, .. } => pending = Some(name),
            }
        }
        if let Some(name) = pending {
            out.insert(name.to_owned(), rendered[pos..].to_owned());
        } else if pos != rendered.len() {
            return None;
        }
        Some(out)
    }
}

/// Length-prefixed SHA-256 over the sorted binding map.
pub fn bindings_digest(bindings: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update((bindings.len() as u64).to_le_bytes());
    for (k, v) in bindings {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub template: TemplateId,
    pub bindings_digest: String,
}

/// All ten templates, loaded once and then read-only.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, Template>,
}

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| {
                let t = Template::parse(id, id.default_source()).expect("builtin templates are well-formed");
                (id, t)
            })
            .collect();
        Self { templates }
    }

    /// Load `<id>.prompt` for every template id from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.prompt", id.as_str()));
            let source = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            templates.insert(id, Template::parse(id, &source)?);
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: TemplateId) -> Result<&Template, TemplateError> {
        self.templates
            .get(&id)
            .ok_or_else(|| TemplateError::UnknownTemplate(id.as_str().to_owned()))
    }

    pub fn render(&self, id: TemplateId, bindings: &BTreeMap<String, String>) -> Result<PromptText, TemplateError> {
        self.get(id)?.render(bindings)
    }

    pub fn render_named(&self, name: &str, bindings: &BTreeMap<String, String>) -> Result<PromptText, TemplateError> {
        self.render(name.parse()?, bindings)
    }

    /// Digest of every template source, for run manifests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, t) in &self.templates {
            h.update(id.as_str().as_bytes());
            for seg in &t.segments {
                match seg {
                    Segment::Literal(l) => {
                        h.update([0u8]);
                        h.update(l.as_bytes());
                    }
                    Segment::Slot { name, optional } => {
                        h.update([1u8, *optional as u8]);
                        h.update(name.as_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Build a binding map from `(name, value)` pairs.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v.to_owned())).collect()
}
