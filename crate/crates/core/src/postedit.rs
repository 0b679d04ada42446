//! Draft generation, critic feedback and prune/append editing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::exec;
use crate::gateway::{CriticVerdict, ModelRole};
use crate::linearize::{linearize, linearized_lines};
use crate::model::{
    dedup_features, Feature, FeatureLabel, FeatureOrigin, GeneratedText, LabeledFeature, MixedModalRecord, TextVariant,
};
use crate::pipeline::{Pipeline, PipelineError};
use crate::prompt::{bindings, format_numbered, parse_feature_list, TemplateId};
use crate::text::split_sentences;

/// Key features per image, in record image order.
pub type KeyFeatures = Vec<(String, Vec<Feature>)>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CriticFeedback {
    /// Non-salient and hallucinated draft features.
    pub erroneous: Vec<LabeledFeature>,
    pub missing_salient: Vec<Feature>,
    pub per_feature_verdicts: BTreeMap<String, CriticVerdict>,
}

impl CriticFeedback {
    pub fn is_empty(&self) -> bool {
        self.erroneous.is_empty() && self.missing_salient.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditVariant {
    Pruned,
    Appended,
    Combined,
}

impl EditVariant {
    pub const ALL: [EditVariant; 3] = [EditVariant::Pruned, EditVariant::Appended, EditVariant::Combined];

    pub fn text_variant(self) -> TextVariant {
        match self {
            EditVariant::Pruned => TextVariant::Pruned,
            EditVariant::Appended => TextVariant::Appended,
            EditVariant::Combined => TextVariant::Combined,
        }
    }
}

impl fmt::Display for EditVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text_variant().as_str())
    }
}

impl FromStr for EditVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pruned" => Ok(EditVariant::Pruned),
            "appended" => Ok(EditVariant::Appended),
            "combined" => Ok(EditVariant::Combined),
            _ => Err(format!("unknown variant {s:?} (expected pruned, appended or combined)")),
        }
    }
}

/// One generator call per image.
pub fn generate_key_features(p: &Pipeline, record: &MixedModalRecord) -> KeyFeatures {
    exec::map(p.exec(), &record.images, |img| {
        let features = p
            .ask(
                ModelRole::GeneratorLmm,
                TemplateId::ImageKeyFeatures,
                &BTreeMap::new(),
                std::slice::from_ref(img),
            )
            .and_then(|(answer, _)| Ok(parse_feature_list(&answer, FeatureOrigin::GeneratedText)?));
        match features {
            Ok(f) => (img.id.clone(), f),
            Err(e) => {
                log::warn!("key features for image {} of {}: {e}", img.id, record.record_id);
                (img.id.clone(), Vec::new())
            }
        }
    })
}

pub fn generate_draft(
    p: &Pipeline,
    record: &MixedModalRecord,
    key_features: &KeyFeatures,
) -> Result<GeneratedText, PipelineError> {
    let all = dedup_features(key_features.iter().flat_map(|(_, f)| f.iter().cloned()));
    let displays: Vec<&str> = all.iter().map(|f| f.display.as_str()).collect();
    let b = bindings([
        ("structured", &linearize(&record.structured).text),
        ("key_features", &format_numbered(&displays)),
    ]);
    let (text, key) = p.ask(ModelRole::GeneratorLmm, TemplateId::DraftGeneration, &b, &record.images)?;
    let text = text.trim().to_owned();
    if text.is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }
    Ok(GeneratedText {
        record_id: record.record_id.clone(),
        variant: TextVariant::Draft,
        text,
        provenance: vec![key],
    })
}

/// Features of `text`, one extractor call per sentence, first occurrence
/// kept. With `structured`, the extractor is told to leave out
/// structured-data features. Fails only when every sentence fails.
pub fn extract_features(
    p: &Pipeline,
    text: &str,
    structured: Option<&str>,
    origin: FeatureOrigin,
) -> Result<Vec<Feature>, PipelineError> {
    if text.trim().is_empty() {
        return Err(PipelineError::EmptyText);
    }
    let sentences = split_sentences(text);
    let mut features = Vec::new();
    let mut last_err = None;
    let mut ok = 0;
    for s in &sentences {
        let mut b = bindings([("sentence", s.as_str())]);
        if let Some(st) = structured {
            b.insert("structured".into(), st.to_owned());
        }
        match p.ask(ModelRole::ExtractorLlm, TemplateId::ExtractFeatures, &b, &[]) {
            Ok((answer, _)) => {
                ok += 1;
                match parse_feature_list(&answer, origin) {
                    Ok(list) => features.extend(list),
                    Err(e) => log::debug!("no features in {s:?}: {e}"),
                }
            }
            Err(e) => {
                log::warn!("extracting features from {s:?}: {e}");
                last_err = Some(e);
            }
        }
    }
    match (ok, last_err) {
        (0, Some(e)) => Err(e),
        _ => Ok(dedup_features(features)),
    }
}

pub fn collect_feedback(p: &Pipeline, draft: &str, record: &MixedModalRecord) -> Result<CriticFeedback, PipelineError> {
    if draft.trim().is_empty() {
        return Err(PipelineError::EmptyText);
    }
    if record.images.is_empty() {
        return Err(PipelineError::NoImages(record.record_id.clone()));
    }
    let structured = linearize(&record.structured).text;
    let features = extract_features(p, draft, Some(&structured), FeatureOrigin::GeneratedText)?;
    let verdicts = exec::map(p.exec(), &features, |f| p.gateway.classify_feature(&record.images, f));
    let mut feedback = CriticFeedback::default();
    for (f, v) in features.iter().zip(verdicts) {
        let v = v?;
        if v.label != FeatureLabel::Salient {
            feedback.erroneous.push(LabeledFeature {
                feature: f.clone(),
                label: v.label,
                rationale: v.rationale.clone(),
            });
        }
        feedback.per_feature_verdicts.insert(f.key.clone(), v);
    }
    let lists = exec::map(p.exec(), &record.images, |img| p.gateway.list_salient(img));
    let mut salient = Vec::new();
    for l in lists {
        salient.extend(l?);
    }
    let keys: Vec<&str> = features.iter().map(|f| f.key.as_str()).collect();
    let lines = linearized_lines(&record.structured);
    for s in dedup_features(salient) {
        // Structured-data features are carried by the draft's structured
        // content and were filtered out of `features` above.
        if !p.sal_match(&s.key, &keys)? && !p.aligned(&s.key, &lines)? {
            feedback.missing_salient.push(s);
        }
    }
    Ok(feedback)
}

fn edit(p: &Pipeline, text: &str, remove: &[&str], add: &[&str]) -> Result<(String, String), PipelineError> {
    let b = bindings([
        ("text", text),
        ("remove", &format_numbered(remove)),
        ("add", &format_numbered(add)),
    ]);
    let (out, key) = p.ask(ModelRole::EditorLlm, TemplateId::PostEdit, &b, &[])?;
    let out = out.trim().to_owned();
    if out.is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }
    Ok((out, key))
}

/// Remove erroneous features; identity without a model call when there
/// are none. Returns the text and the cache key of the call, if any.
pub fn prune(
    p: &Pipeline,
    text: &str,
    erroneous: &[LabeledFeature],
) -> Result<(String, Option<String>), PipelineError> {
    if erroneous.is_empty() {
        return Ok((text.to_owned(), None));
    }
    let remove: Vec<&str> = erroneous.iter().map(|e| e.feature.display.as_str()).collect();
    let (out, key) = edit(p, text, &remove, &[])?;
    Ok((out, Some(key)))
}

pub fn append(p: &Pipeline, text: &str, missing: &[Feature]) -> Result<(String, Option<String>), PipelineError> {
    if missing.is_empty() {
        return Ok((text.to_owned(), None));
    }
    let add: Vec<&str> = missing.iter().map(|f| f.display.as_str()).collect();
    let (out, key) = edit(p, text, &[], &add)?;
    Ok((out, Some(key)))
}

/// Draft, its feedback and every requested variant for one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEdits {
    pub draft: GeneratedText,
    pub feedback: CriticFeedback,
    pub variants: Vec<GeneratedText>,
}

impl RecordEdits {
    pub fn variant(&self, v: EditVariant) -> Option<&GeneratedText> {
        self.variants.iter().find(|g| g.variant == v.text_variant())
    }
}

pub fn draft(p: &Pipeline, record: &MixedModalRecord) -> Result<GeneratedText, PipelineError> {
    let kf = generate_key_features(p, record);
    generate_draft(p, record, &kf)
}

/// Feedback is computed once on the draft and shared by all variants.
pub fn run_variants(
    p: &Pipeline,
    record: &MixedModalRecord,
    variants: &[EditVariant],
) -> Result<RecordEdits, PipelineError> {
    let draft = draft(p, record)?;
    let feedback = collect_feedback(p, &draft.text, record)?;
    let mut pruned: Option<(String, Option<String>)> = None;
    let mut out = Vec::new();
    let mut get_pruned = |p: &Pipeline| -> Result<(String, Option<String>), PipelineError> {
        if pruned.is_none() {
            pruned = Some(prune(p, &draft.text, &feedback.erroneous)?);
        }
        Ok(pruned.clone().unwrap())
    };
    for &v in variants {
        let mut provenance = draft.provenance.clone();
        let text = match v {
            EditVariant::Pruned => {
                let (t, k) = get_pruned(p)?;
                provenance.extend(k);
                t
            }
            EditVariant::Appended => {
                let (t, k) = append(p, &draft.text, &feedback.missing_salient)?;
                provenance.extend(k);
                t
            }
            EditVariant::Combined => {
                let (t, k1) = get_pruned(p)?;
                let (t, k2) = append(p, &t, &feedback.missing_salient)?;
                provenance.extend(k1);
                provenance.extend(k2);
                t
            }
        };
        out.push(GeneratedText {
            record_id: record.record_id.clone(),
            variant: v.text_variant(),
            text,
            provenance,
        });
    }
    Ok(RecordEdits {
        draft,
        feedback,
        variants: out,
    })
}

pub fn run(p: &Pipeline, record: &MixedModalRecord, variant: EditVariant) -> Result<GeneratedText, PipelineError> {
    let edits = run_variants(p, record, &[variant])?;
    Ok(edits.variants.into_iter().next().expect("one variant"))
}

/// Audit line for one edited text.
pub fn edit_line(text: &GeneratedText, feedback: &CriticFeedback) -> Value {
    json!({
        "record_id": text.record_id,
        "variant": text.variant,
        "text": text.text,
        "erroneous": feedback.erroneous.iter().map(|e| json!({
            "feature": e.feature.display,
            "label": e.label,
            "rationale": e.rationale,
        })).collect::<Vec<_>>(),
        "missing": feedback.missing_salient.iter().map(|f| f.display.as_str()).collect::<Vec<_>>(),
    })
}

/// Audit line for a feedback pass.
pub fn feedback_line(record_id: &str, draft: &str, feedback: &CriticFeedback) -> Value {
    json!({
        "record_id": record_id,
        "draft": draft,
        "verdicts": feedback.per_feature_verdicts,
        "erroneous": feedback.erroneous.iter().map(|e| json!({
            "feature": e.feature.display,
            "label": e.label,
            "rationale": e.rationale,
        })).collect::<Vec<_>>(),
        "missing": feedback.missing_salient.iter().map(|f| f.display.as_str()).collect::<Vec<_>>(),
    })
}
