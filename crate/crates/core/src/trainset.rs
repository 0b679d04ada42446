//! Critic training data from ground-truth and generated texts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::exec;
use crate::gateway::{GatewayError, ModelRole};
use crate::linearize::{linearize, linearized_lines};
use crate::matching::structured_value_keys;
use crate::model::{dedup_features, Feature, FeatureLabel, FeatureOrigin, ImageRef, MixedModalRecord, StructuredData};
use crate::pipeline::{AlignmentMode, Pipeline, PipelineError};
use crate::postedit;
use crate::prompt::{bindings, format_numbered, parse_saliency, parse_visibility, TemplateId};
use crate::text::{first_sentence, split_sentences};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InventorySource {
    GroundTruth,
    Generated,
}

/// Visibility and saliency partition of one text's features, by key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureInventory {
    pub record_id: String,
    pub source: InventorySource,
    pub features: Vec<Feature>,
    pub visible: BTreeSet<String>,
    pub not_visible: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
    pub salient: BTreeSet<String>,
    pub non_salient: BTreeSet<String>,
}

impl FeatureInventory {
    pub fn check(&self) -> Result<(), String> {
        let all: BTreeSet<String> = self.features.iter().map(|f| f.key.clone()).collect();
        let covered: BTreeSet<String> = self.visible.union(&self.not_visible).cloned().collect();
        if covered != all {
            return Err("visible ∪ not_visible differs from the feature set".into());
        }
        if self.visible.intersection(&self.not_visible).next().is_some() {
            return Err("a feature is both visible and not visible".into());
        }
        if !self.hallucinated.is_subset(&self.not_visible) {
            return Err("hallucinated ⊄ not_visible".into());
        }
        if self.salient.intersection(&self.non_salient).next().is_some() {
            return Err("salient ∩ non_salient ≠ ∅".into());
        }
        if !self.salient.is_subset(&self.visible) || !self.non_salient.is_subset(&self.visible) {
            return Err("salient ∪ non_salient ⊄ visible".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationExample {
    pub image_id: String,
    pub feature: Feature,
    pub label: FeatureLabel,
    pub rationale: String,
}

impl ClassificationExample {
    pub fn to_json(&self) -> Value {
        json!({
            "image_id": self.image_id,
            "feature": self.feature.display,
            "label": self.label,
            "rationale": self.rationale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SalientListExample {
    pub image_id: String,
    pub salient_features: Vec<Feature>,
}

impl SalientListExample {
    pub fn to_json(&self) -> Value {
        let features: Vec<&str> = self.salient_features.iter().map(|f| f.display.as_str()).collect();
        json!({ "image_id": self.image_id, "salient_features": features })
    }
}

fn displays(features: &[Feature]) -> String {
    let d: Vec<&str> = features.iter().map(|f| f.display.as_str()).collect();
    format_numbered(&d)
}

fn keys(features: &[Feature]) -> BTreeSet<String> {
    features.iter().map(|f| f.key.clone()).collect()
}

/// Step 1: features of a text, structured-data features included.
pub fn extract_features(p: &Pipeline, text: &str, origin: FeatureOrigin) -> Result<Vec<Feature>, PipelineError> {
    postedit::extract_features(p, text, None, origin)
}

fn visibility_call(p: &Pipeline, features: &[Feature], images: &[ImageRef]) -> Result<BTreeSet<String>, PipelineError> {
    let b = bindings([("features", &displays(features))]);
    let (answer, _) = p.ask(ModelRole::VisibilityVlm, TemplateId::VisibilityCheck, &b, images)?;
    let origin = features[0].origin;
    let (visible, _) = parse_visibility(&answer, origin)?;
    let asked = keys(features);
    Ok(visible
        .into_iter()
        .map(|f| f.key)
        .filter(|k| asked.contains(k))
        .collect())
}

/// Keys visible in each image, one call per image.
pub fn visible_per_image(
    p: &Pipeline,
    features: &[Feature],
    images: &[ImageRef],
) -> Result<Vec<BTreeSet<String>>, PipelineError> {
    if features.is_empty() {
        return Ok(vec![BTreeSet::new(); images.len()]);
    }
    exec::map(p.exec(), images, |img| {
        visibility_call(p, features, std::slice::from_ref(img))
    })
    .into_iter()
    .collect()
}

/// Step 2: one call over all images; falls back to per-image calls when
/// the backend rejects multi-image requests. A feature the model leaves
/// out of both sections counts as not visible.
pub fn partition_visibility(
    p: &Pipeline,
    features: &[Feature],
    images: &[ImageRef],
) -> Result<(Vec<Feature>, Vec<Feature>), PipelineError> {
    if features.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    if images.is_empty() {
        return Err(PipelineError::Invalid(
            "visibility check needs at least one image".into(),
        ));
    }
    let visible = match visibility_call(p, features, images) {
        Ok(v) => v,
        Err(PipelineError::Gateway(GatewayError::BackendError { status, .. }))
            if images.len() > 1 && (400..500).contains(&status) =>
        {
            log::info!("multi-image visibility rejected ({status}); checking images one by one");
            visible_per_image(p, features, images)?.into_iter().flatten().collect()
        }
        Err(e) => return Err(e),
    };
    Ok(features.iter().cloned().partition(|f| visible.contains(&f.key)))
}

/// Step 3: not-visible features that the structured data does not support.
pub fn filter_hallucinated(
    p: &Pipeline,
    not_visible: &[Feature],
    structured: &StructuredData,
) -> Result<BTreeSet<String>, PipelineError> {
    if not_visible.is_empty() {
        return Ok(BTreeSet::new());
    }
    match p.settings.alignment {
        AlignmentMode::Llm => {
            let b = bindings([
                ("structured", &linearize(structured).text),
                ("features", &displays(not_visible)),
            ]);
            let listed = p.ask_list(
                ModelRole::ExtractorLlm,
                TemplateId::HallucinationFilter,
                &b,
                &[],
                FeatureOrigin::GeneratedText,
            )?;
            Ok(keys(&listed).intersection(&keys(not_visible)).cloned().collect())
        }
        AlignmentMode::Fallback => {
            let lines = linearized_lines(structured);
            let mut out = BTreeSet::new();
            for f in not_visible {
                if !p.aligned(&f.key, &lines)? {
                    out.insert(f.key.clone());
                }
            }
            Ok(out)
        }
    }
}

/// Step 4: ground-truth visible features are salient, and so is every
/// generated visible feature matching one of them or a structured value.
pub fn reconcile_saliency(
    p: &Pipeline,
    visible_gen: &BTreeSet<String>,
    visible_gt: &BTreeSet<String>,
    structured: &StructuredData,
) -> Result<(BTreeSet<String>, BTreeSet<String>), PipelineError> {
    let mut targets: Vec<String> = visible_gt.iter().cloned().collect();
    targets.extend(structured_value_keys(structured));
    let mut salient = visible_gt.clone();
    let pending: Vec<&String> = visible_gen.iter().filter(|g| !visible_gt.contains(*g)).collect();
    match p.settings.alignment {
        AlignmentMode::Llm if !pending.is_empty() => {
            let generated: Vec<&str> = pending.iter().map(|s| s.as_str()).collect();
            let gt: Vec<&str> = visible_gt.iter().map(String::as_str).collect();
            let b = bindings([
                ("generated", &format_numbered(&generated)),
                ("ground_truth", &format_numbered(&gt)),
                ("structured", &linearize(structured).text),
            ]);
            let (answer, _) = p.ask(ModelRole::ExtractorLlm, TemplateId::SaliencyCompare, &b, &[])?;
            let (sal, _) = parse_saliency(&answer, FeatureOrigin::GeneratedText)?;
            let judged = keys(&sal);
            for g in pending {
                if judged.contains(g) || targets.contains(g) {
                    salient.insert(g.clone());
                }
            }
        }
        _ => {
            for g in pending {
                if p.sal_match(g, &targets)? {
                    salient.insert(g.clone());
                }
            }
        }
    }
    let non_salient = visible_gen.difference(&salient).cloned().collect();
    Ok((salient, non_salient))
}

fn one_rationale(p: &Pipeline, feature: &Feature, label: FeatureLabel) -> Result<String, PipelineError> {
    let ask = |hint: Option<&str>| {
        let mut b = bindings([("feature", feature.display.as_str()), ("label", label.as_str())]);
        if let Some(h) = hint {
            b.insert("hint".into(), h.to_owned());
        }
        p.ask(ModelRole::ExtractorLlm, TemplateId::RationaleGen, &b, &[])
            .map(|(a, _)| a.trim().to_owned())
    };
    let first = ask(None)?;
    if split_sentences(&first).len() == 1 {
        return Ok(first_sentence(&first));
    }
    log::debug!("rationale for {feature} is not one sentence; retrying");
    let second = ask(Some(
        "Your previous answer was too long. Answer with exactly one sentence.",
    ))?;
    let s = first_sentence(&second);
    if s.is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }
    Ok(s)
}

/// Step 5: one-sentence rationales; hallucinated examples get the fixed
/// sentence.
pub fn attach_rationales(
    p: &Pipeline,
    mut examples: Vec<ClassificationExample>,
) -> Result<Vec<ClassificationExample>, PipelineError> {
    let mut wanted: Vec<(Feature, FeatureLabel)> = Vec::new();
    let mut seen = BTreeSet::new();
    for e in &examples {
        if e.label != FeatureLabel::Hallucinated && seen.insert((e.feature.key.clone(), e.label)) {
            wanted.push((e.feature.clone(), e.label));
        }
    }
    let answers = exec::map(p.exec(), &wanted, |(f, l)| one_rationale(p, f, *l));
    let mut by_key = BTreeMap::new();
    for ((f, l), a) in wanted.into_iter().zip(answers) {
        by_key.insert((f.key, l), a?);
    }
    for e in &mut examples {
        e.rationale = match e.label {
            FeatureLabel::Hallucinated => p.gateway.hallucinated_rationale().to_owned(),
            l => by_key[&(e.feature.key.clone(), l)].clone(),
        };
    }
    Ok(examples)
}

/// Everything the builder derived from one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordBuild {
    pub record_id: String,
    pub ground_truth: FeatureInventory,
    pub generated: FeatureInventory,
    pub draft: String,
    pub classification: Vec<ClassificationExample>,
    pub salient_lists: Vec<SalientListExample>,
}

fn inventory(
    p: &Pipeline,
    record: &MixedModalRecord,
    source: InventorySource,
    features: Vec<Feature>,
) -> Result<FeatureInventory, PipelineError> {
    let (visible, not_visible) = partition_visibility(p, &features, &record.images)?;
    let hallucinated = filter_hallucinated(p, &not_visible, &record.structured)?;
    Ok(FeatureInventory {
        record_id: record.record_id.clone(),
        source,
        visible: keys(&visible),
        not_visible: keys(&not_visible),
        hallucinated,
        salient: BTreeSet::new(),
        non_salient: BTreeSet::new(),
        features,
    })
}

pub fn build_record(p: &Pipeline, record: &MixedModalRecord) -> Result<RecordBuild, PipelineError> {
    let gt_text = record
        .ground_truth_text
        .as_deref()
        .ok_or_else(|| PipelineError::Invalid(format!("record {} has no ground_truth_text", record.record_id)))?;
    if record.images.is_empty() {
        return Err(PipelineError::NoImages(record.record_id.clone()));
    }
    let draft = postedit::draft(p, record)?.text;
    let gt_features = extract_features(p, gt_text, FeatureOrigin::GroundTruthText)?;
    let gen_features = extract_features(p, &draft, FeatureOrigin::GeneratedText)?;
    let mut gt = inventory(p, record, InventorySource::GroundTruth, gt_features)?;
    let mut gen = inventory(p, record, InventorySource::Generated, gen_features)?;
    let (salient, non_salient) = reconcile_saliency(p, &gen.visible, &gt.visible, &record.structured)?;
    gt.salient = gt.visible.clone();
    gen.salient = gen.visible.intersection(&salient).cloned().collect();
    gen.non_salient = non_salient;

    let mut labels: BTreeMap<String, FeatureLabel> = BTreeMap::new();
    let mut put = |k: &String, l: FeatureLabel| {
        labels.entry(k.clone()).and_modify(|x| *x = x.join(l)).or_insert(l);
    };
    for inv in [&gt, &gen] {
        inv.hallucinated.iter().for_each(|k| put(k, FeatureLabel::Hallucinated));
        inv.non_salient.iter().for_each(|k| put(k, FeatureLabel::NonSalient));
        inv.salient.iter().for_each(|k| put(k, FeatureLabel::Salient));
    }
    let labeled = dedup_features(gt.features.iter().chain(&gen.features).cloned());
    let visible_labeled: Vec<Feature> = labeled
        .iter()
        .filter(|f| {
            matches!(
                labels.get(&f.key),
                Some(FeatureLabel::Salient | FeatureLabel::NonSalient)
            )
        })
        .cloned()
        .collect();
    let per_image = if record.images.len() == 1 {
        vec![keys(&visible_labeled)]
    } else {
        visible_per_image(p, &visible_labeled, &record.images)?
    };
    let mut examples = Vec::new();
    for f in &labeled {
        let Some(&label) = labels.get(&f.key) else { continue };
        let mut images: Vec<&ImageRef> = match label {
            FeatureLabel::Hallucinated => record.images.iter().collect(),
            _ => record
                .images
                .iter()
                .zip(&per_image)
                .filter(|(_, vis)| vis.contains(&f.key))
                .map(|(i, _)| i)
                .collect(),
        };
        if images.is_empty() {
            images = record.images.iter().collect();
        }
        for img in images {
            examples.push(ClassificationExample {
                image_id: img.id.clone(),
                feature: f.clone(),
                label,
                rationale: String::new(),
            });
        }
    }
    let classification = attach_rationales(p, examples)?;

    let salient_lists = record
        .images
        .iter()
        .zip(&per_image)
        .filter_map(|(img, vis)| {
            let s: Vec<Feature> = gt
                .features
                .iter()
                .filter(|f| gt.salient.contains(&f.key) && vis.contains(&f.key))
                .cloned()
                .collect();
            (!s.is_empty()).then(|| SalientListExample {
                image_id: img.id.clone(),
                salient_features: s,
            })
        })
        .collect();

    for inv in [&gt, &gen] {
        inv.check()
            .map_err(|e| PipelineError::Invalid(format!("record {}: {e}", record.record_id)))?;
    }
    Ok(RecordBuild {
        record_id: record.record_id.clone(),
        ground_truth: gt,
        generated: gen,
        draft,
        classification,
        salient_lists,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
}

fn class_seed(seed: u64, class: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(class.as_bytes());
    h.finalize().into()
}

/// Seeded shuffle per class, then the first round(n·ratio) of each class
/// go to train. Train and val are each shuffled once more so classes
/// interleave.
pub fn stratified_split<T, F>(items: Vec<T>, class_of: F, ratio: f64, seed: u64) -> Split<T>
where
    F: Fn(&T) -> String,
{
    let mut classes: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for item in items {
        classes.entry(class_of(&item)).or_default().push(item);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut members) in classes {
        let mut rng = ChaCha8Rng::from_seed(class_seed(seed, &class));
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64) * ratio).round() as usize;
        let rest = members.split_off(n_train.min(members.len()));
        train.extend(members);
        val.extend(rest);
    }
    train.shuffle(&mut ChaCha8Rng::from_seed(class_seed(seed, "\u{1f}train")));
    val.shuffle(&mut ChaCha8Rng::from_seed(class_seed(seed, "\u{1f}val")));
    Split { train, val }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub hallucinated: usize,
    pub salient: usize,
    #[serde(rename = "non-salient")]
    pub non_salient: usize,
}

impl ClassCounts {
    pub fn of(examples: &[ClassificationExample]) -> Self {
        let mut c = ClassCounts::default();
        for e in examples {
            c.total += 1;
            match e.label {
                FeatureLabel::Hallucinated => c.hallucinated += 1,
                FeatureLabel::Salient => c.salient += 1,
                FeatureLabel::NonSalient => c.non_salient += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub records: usize,
    pub failed_records: Vec<String>,
    pub split_ratio: f64,
    pub seed: u64,
    pub classification_train: ClassCounts,
    pub classification_val: ClassCounts,
    pub salient_train: usize,
    pub salient_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainsetBuild {
    pub records: Vec<RecordBuild>,
    pub classification: Split<ClassificationExample>,
    pub salient: Split<SalientListExample>,
    pub manifest: BuildManifest,
}

/// Largest tolerated share of failing records.
pub const MAX_FAILURE_RATE: f64 = 0.10;

pub fn build(
    p: &Pipeline,
    corpus: &[MixedModalRecord],
    split_ratio: f64,
    seed: u64,
) -> Result<TrainsetBuild, PipelineError> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(PipelineError::Invalid(format!(
            "split_ratio {split_ratio} not in (0, 1)"
        )));
    }
    if let Some(r) = corpus.iter().find(|r| r.ground_truth_text.is_none()) {
        return Err(PipelineError::Invalid(format!(
            "record {} has no ground_truth_text",
            r.record_id
        )));
    }
    let results = exec::map(p.exec(), corpus, |r| {
        p.check_cancelled()?;
        build_record(p, r)
    });
    p.check_cancelled()?;
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in corpus.iter().zip(results) {
        match res {
            Ok(b) => records.push(b),
            Err(e) => {
                log::warn!("record {} skipped: {e}", r.record_id);
                failed.push(r.record_id.clone());
            }
        }
    }
    if failed.len() as f64 > MAX_FAILURE_RATE * corpus.len() as f64 {
        return Err(PipelineError::TooManyFailures {
            failed: failed.len(),
            total: corpus.len(),
        });
    }
    let classification_all: Vec<ClassificationExample> =
        records.iter().flat_map(|r| r.classification.iter().cloned()).collect();
    let salient_all: Vec<SalientListExample> = records.iter().flat_map(|r| r.salient_lists.iter().cloned()).collect();
    let classification = stratified_split(classification_all, |e| e.label.as_str().to_owned(), split_ratio, seed);
    let salient = stratified_split(salient_all, |_| "salient_list".to_owned(), split_ratio, seed);
    let manifest = BuildManifest {
        records: corpus.len(),
        failed_records: failed,
        split_ratio,
        seed,
        classification_train: ClassCounts::of(&classification.train),
        classification_val: ClassCounts::of(&classification.val),
        salient_train: salient.train.len(),
        salient_val: salient.val.len(),
    };
    Ok(TrainsetBuild {
        records,
        classification,
        salient,
        manifest,
    })
}

fn write_jsonl(path: &Path, lines: impl Iterator<Item = Value>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    out.flush()
}

pub const CLASSIFICATION_TRAIN: &str = "classification.train.jsonl";
pub const CLASSIFICATION_VAL: &str = "classification.val.jsonl";
pub const SALIENT_TRAIN: &str = "salient.train.jsonl";
pub const SALIENT_VAL: &str = "salient.val.jsonl";
pub const MANIFEST: &str = "trainset.manifest.json";

pub fn write_outputs(dir: &Path, build: &TrainsetBuild) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(
        &dir.join(CLASSIFICATION_TRAIN),
        build.classification.train.iter().map(|e| e.to_json()),
    )?;
    write_jsonl(
        &dir.join(CLASSIFICATION_VAL),
        build.classification.val.iter().map(|e| e.to_json()),
    )?;
    write_jsonl(
        &dir.join(SALIENT_TRAIN),
        build.salient.train.iter().map(|e| e.to_json()),
    )?;
    write_jsonl(&dir.join(SALIENT_VAL), build.salient.val.iter().map(|e| e.to_json()))?;
    let manifest = serde_json::to_string_pretty(&build.manifest).expect("serialize");
    fs::write(dir.join(MANIFEST), manifest + "\n")
}
