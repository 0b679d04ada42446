//! Worked examples for the individual builder and editor stages.

use std::collections::BTreeSet;
use std::sync::Arc;

use visicrit_core::exec::ExecMode;
use visicrit_core::gateway::mock::{FnBackend, MockSettings, MockWorld};
use visicrit_core::gateway::{Cache, Gateway, ModelRole};
use visicrit_core::model::{
    canonicalize_feature, Feature, FeatureLabel, FeatureOrigin, ImageRef, MixedModalRecord, MockManifest,
    StructuredData, Triple,
};
use visicrit_core::pipeline::{Pipeline, PipelineError, PipelineSettings};
use visicrit_core::postedit::{self, EditVariant};
use visicrit_core::prompt::{TemplateId, TemplateSet};
use visicrit_core::trainset::{self, ClassificationExample};

const VOCAB: &[&str] = &[
    "picket fence",
    "cellar",
    "garden",
    "swimming pool",
    "verandah",
    "small tree",
    "north-facing backyard",
];

const FIXED: &str = "The feature is not visible in the image.";

fn world() -> Arc<MockWorld> {
    Arc::new(MockWorld::new(
        Arc::new(TemplateSet::builtin()),
        MockSettings::default(),
        VOCAB,
    ))
}

fn settings() -> PipelineSettings {
    PipelineSettings {
        exec: ExecMode::Sequential,
        ..PipelineSettings::default()
    }
}

fn mock() -> Pipeline {
    let gw = Gateway::new(Cache::in_memory()).route_all(world(), 0);
    Pipeline::new(gw, Arc::new(TemplateSet::builtin()), settings())
}

/// Mock everywhere except `role`, which answers `reply` to `template`.
fn scripted(role: ModelRole, template: TemplateId, reply: &'static str) -> Pipeline {
    let w = world();
    let fallback = w.clone();
    let fixture = FnBackend::new("fixture", move |req| match &req.prompt {
        Some(p) if p.template == template => Ok(reply.as_bytes().to_vec()),
        _ => visicrit_core::gateway::Backend::call(fallback.as_ref(), req),
    });
    let gw = Gateway::new(Cache::in_memory())
        .route_all(w, 0)
        .route(role, Arc::new(fixture), 0);
    Pipeline::new(gw, Arc::new(TemplateSet::builtin()), settings())
}

fn f(s: &str) -> Feature {
    canonicalize_feature(s, FeatureOrigin::GeneratedText).unwrap()
}

fn image(id: &str, visible: &[&str], salient: &[&str]) -> ImageRef {
    ImageRef::new(id, format!("mock:{id}")).with_manifest(MockManifest::new(visible, salient).unwrap())
}

fn keys(fs: &[Feature]) -> Vec<&str> {
    fs.iter().map(|f| f.key.as_str()).collect()
}

fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn kg(triples: &[(&str, &str, &str)]) -> StructuredData {
    StructuredData::Kg(triples.iter().map(|(s, r, o)| Triple::new(*s, *r, *o)).collect())
}

fn record(images: Vec<ImageRef>) -> MixedModalRecord {
    MixedModalRecord {
        record_id: "r1".into(),
        structured: kg(&[("house", "hasBedrooms", "3")]),
        images,
        ground_truth_text: None,
    }
}

#[test]
fn extraction() {
    let p = mock();
    let got = trainset::extract_features(
        &p,
        "The house has a picket fence and a cellar.",
        FeatureOrigin::GroundTruthText,
    )
    .unwrap();
    assert_eq!(keys(&got), ["picket fence", "cellar"]);
    assert!(matches!(
        trainset::extract_features(&p, "", FeatureOrigin::GroundTruthText),
        Err(PipelineError::EmptyText)
    ));
    let got = trainset::extract_features(
        &p,
        "It has a garden. The garden is large.",
        FeatureOrigin::GroundTruthText,
    )
    .unwrap();
    assert_eq!(keys(&got), ["garden"]);
}

#[test]
fn visibility_partition() {
    let p = mock();
    let imgs = [image("a", &["picket fence"], &[])];
    let (vis, not) = trainset::partition_visibility(&p, &[f("picket fence"), f("swimming pool")], &imgs).unwrap();
    assert_eq!((keys(&vis), keys(&not)), (vec!["picket fence"], vec!["swimming pool"]));

    let (_, not) = trainset::partition_visibility(&p, &[f("picket fence")], &imgs).unwrap();
    assert!(not.is_empty());

    let imgs = [
        image("1", &["cellar"], &[]),
        image("2", &["garden"], &[]),
        image("3", &["verandah"], &[]),
    ];
    let (vis, _) = trainset::partition_visibility(&p, &[f("garden")], &imgs).unwrap();
    assert_eq!(keys(&vis), ["garden"]);
}

#[test]
fn hallucination_filter() {
    let p = mock();
    let data = kg(&[("house", "hasBedrooms", "3")]);
    assert!(trainset::filter_hallucinated(&p, &[f("3 bedrooms")], &data)
        .unwrap()
        .is_empty());
    assert_eq!(
        trainset::filter_hallucinated(&p, &[f("swimming pool")], &data).unwrap(),
        set(&["swimming pool"])
    );
    assert!(trainset::filter_hallucinated(&p, &[], &data).unwrap().is_empty());
}

#[test]
fn saliency_reconciliation() {
    let p = mock();
    let none = kg(&[("house", "hasBedrooms", "3")]);
    let (sal, non) = trainset::reconcile_saliency(
        &p,
        &set(&["picket fence", "small tree"]),
        &set(&["picket fence", "verandah"]),
        &none,
    )
    .unwrap();
    assert_eq!((sal, non), (set(&["picket fence", "verandah"]), set(&["small tree"])));

    let (sal, non) = trainset::reconcile_saliency(&p, &set(&[]), &set(&["verandah"]), &none).unwrap();
    assert_eq!((sal, non), (set(&["verandah"]), set(&[])));

    let data = kg(&[("house", "hasFeature", "north-facing backyard")]);
    let (sal, _) = trainset::reconcile_saliency(&p, &set(&["north-facing backyard"]), &set(&[]), &data).unwrap();
    assert!(sal.contains("north-facing backyard"));
}

fn example(key: &str, label: FeatureLabel) -> ClassificationExample {
    ClassificationExample {
        image_id: "a".into(),
        feature: f(key),
        label,
        rationale: String::new(),
    }
}

#[test]
fn rationales() {
    let p = mock();
    let out = trainset::attach_rationales(
        &p,
        vec![
            example("swimming pool", FeatureLabel::Hallucinated),
            example("picket fence", FeatureLabel::Salient),
        ],
    )
    .unwrap();
    assert_eq!(out[0].rationale, FIXED);
    assert!(!out[1].rationale.is_empty() && out[1].rationale != FIXED);

    let p = scripted(
        ModelRole::ExtractorLlm,
        TemplateId::RationaleGen,
        "The fence is prominent. It frames the lawn.",
    );
    let out = trainset::attach_rationales(&p, vec![example("picket fence", FeatureLabel::Salient)]).unwrap();
    assert_eq!(out[0].rationale, "The fence is prominent.");
}

#[test]
fn key_features_and_drafts() {
    let rec = record(vec![image("a", &["picket fence", "verandah"], &["verandah"])]);
    let kf = postedit::generate_key_features(&mock(), &rec);
    assert_eq!(kf.len(), 1);
    assert_eq!(kf[0].0, "a");

    let p = scripted(
        ModelRole::GeneratorLmm,
        TemplateId::ImageKeyFeatures,
        "1. yellow exterior\n2. white trim",
    );
    let kf = postedit::generate_key_features(&p, &rec);
    assert_eq!(keys(&kf[0].1), ["yellow exterior", "white trim"]);

    let draft = postedit::generate_draft(&mock(), &rec, &vec![("a".into(), vec![])]).unwrap();
    assert!(!draft.text.is_empty());
}

#[test]
fn feedback_lists_errors_and_omissions() {
    let p = mock();
    let rec = record(vec![
        image("a", &["picket fence"], &["picket fence"]),
        image("b", &["verandah"], &["verandah"]),
    ]);
    let fb = postedit::collect_feedback(&p, "It has a swimming pool. There is a picket fence.", &rec).unwrap();
    let err: Vec<(&str, FeatureLabel)> = fb.erroneous.iter().map(|e| (e.feature.key.as_str(), e.label)).collect();
    assert_eq!(err, [("swimming pool", FeatureLabel::Hallucinated)]);
    assert_eq!(keys(&fb.missing_salient), ["verandah"]);

    let fb = postedit::collect_feedback(&p, "A picket fence and a verandah.", &rec).unwrap();
    assert!(fb.is_empty(), "{fb:?}");
}

#[test]
fn edits() {
    let p = mock();
    let text = "It has a garden. It has a cellar.";
    let before = p.gateway.stats().backend_calls;
    assert_eq!(postedit::prune(&p, text, &[]).unwrap(), (text.to_owned(), None));
    assert_eq!(postedit::append(&p, text, &[]).unwrap(), (text.to_owned(), None));
    assert_eq!(p.gateway.stats().backend_calls, before);

    let (out, key) = postedit::append(&p, text, &[f("verandah"), f("picket fence")]).unwrap();
    assert!(key.is_some());
    for x in ["verandah", "picket fence"] {
        assert!(out.contains(&format!("It also features {x}.")), "{out}");
    }

    let rec = record(vec![image("a", &["garden", "cellar"], &[])]);
    let fb = postedit::collect_feedback(&p, text, &rec).unwrap();
    assert_eq!(fb.erroneous.len(), 2);
    let (out, _) = postedit::prune(&p, text, &fb.erroneous).unwrap();
    assert!(!out.trim().is_empty());
}

#[test]
fn clean_draft_passes_through_every_variant() {
    let p = scripted(
        ModelRole::GeneratorLmm,
        TemplateId::DraftGeneration,
        "A lovely home with a verandah.",
    );
    let rec = record(vec![image("a", &["verandah"], &["verandah"])]);
    let edits = postedit::run_variants(&p, &rec, &EditVariant::ALL).unwrap();
    assert!(edits.feedback.is_empty());
    for v in EditVariant::ALL {
        assert_eq!(edits.variant(v).unwrap().text, edits.draft.text);
    }
}
