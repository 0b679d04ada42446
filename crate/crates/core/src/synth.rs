//! Seeded synthetic corpora for the mock world.
//!
//! Every record comes with the truth the generator planted: which
//! phrases the ground-truth text mentions and which of them the
//! structured data supports. Manifests mark visible features, and as
//! salient the visible ones that the ground truth mentions or the
//! structured data lists.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gateway::mock::{MockSettings, MockWorld};
use crate::model::{ImageRef, MixedModalRecord, MockManifest, StructuredData, Triple};
use crate::prompt::TemplateSet;

pub const VISIBLE_POOL: &[&str] = &[
    "picket fence",
    "verandah",
    "tiled roof",
    "bay window",
    "timber deck",
    "brick chimney",
    "rose garden",
    "double garage",
    "gabled roof",
    "stone path",
    "front lawn",
    "wrought iron gate",
    "french doors",
    "ceiling fan",
    "hardwood floors",
    "marble benchtop",
    "walk-in pantry",
    "clawfoot bath",
    "skylight",
    "pergola",
    "vegetable patch",
    "solar panels",
    "rain tank",
    "carport",
    "balcony",
    "fireplace",
    "lemon tree",
    "garden shed",
    "arched doorway",
    "porch swing",
];

/// Phrases ground-truth texts mention without the images showing them.
pub const GT_HALLUCINATION_POOL: &[&str] = &["ducted heating", "quiet street", "city views", "walk to schools"];

/// Phrases the mock generator invents.
pub const DRAFT_HALLUCINATION_POOL: &[&str] =
    &["swimming pool", "tennis court", "wine cellar", "home theatre", "sauna"];

/// Values of `hasFeature` triples.
pub const STRUCTURED_POOL: &[&str] = &["north-facing backyard", "air conditioning", "alarm system", "ensuite"];

pub const SUBURBS: &[&str] = &["Brunswick", "Fitzroy", "Carlton", "Richmond", "Northcote"];

/// What the generator planted in one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordTruth {
    pub record_id: String,
    /// Keys the ground-truth text mentions.
    pub gt_mentions: BTreeSet<String>,
    /// Vocabulary keys the structured data supports.
    pub structured_supported: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<MixedModalRecord>,
    pub truth: Vec<RecordTruth>,
    pub settings: MockSettings,
    /// Every phrase a mock world over this corpus recognizes.
    pub vocabulary: Vec<String>,
}

impl SynthCorpus {
    pub fn world(&self, templates: Arc<TemplateSet>) -> MockWorld {
        MockWorld::new(templates, self.settings.clone(), &self.vocabulary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub records: usize,
    pub max_images: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            records: 20,
            max_images: 3,
            seed: 7,
        }
    }
}

fn count_phrase(n: u32, noun: &str) -> String {
    format!("{n} {noun}")
}

pub fn generate(opts: SynthOptions) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::with_capacity(opts.records);
    let mut truth = Vec::with_capacity(opts.records);
    for r in 0..opts.records {
        let record_id = format!("syn-{r:04}");
        let n_images = rng.random_range(1..=opts.max_images.max(1));
        let bedrooms: u32 = rng.random_range(1..=5);
        let bathrooms: u32 = rng.random_range(1..=3);
        let suburb = *SUBURBS.choose(&mut rng).unwrap();
        let structured_feature = *STRUCTURED_POOL.choose(&mut rng).unwrap();

        let mut pool: Vec<&str> = VISIBLE_POOL.to_vec();
        pool.shuffle(&mut rng);
        let mut visible: Vec<Vec<String>> = Vec::new();
        let mut cursor = 0;
        for _ in 0..n_images {
            let k = rng.random_range(2..=4);
            let mut v: Vec<String> = pool[cursor..cursor + k].iter().map(|s| s.to_string()).collect();
            cursor += k;
            // Occasionally a feature shows in a second image too.
            if let Some(prev) = visible.last() {
                if rng.random_bool(0.3) {
                    v.push(prev[0].clone());
                }
            }
            visible.push(v);
        }
        // The structured feature is sometimes also photographed.
        let structured_visible = rng.random_bool(0.5);
        if structured_visible {
            let i = rng.random_range(0..n_images);
            visible[i].push(structured_feature.to_owned());
        }

        let all_visible: BTreeSet<&String> = visible.iter().flatten().collect();
        let mut gt_visible: Vec<String> = all_visible
            .iter()
            .filter(|f| f.as_str() != structured_feature && rng.random_bool(0.6))
            .map(|f| f.to_string())
            .collect();
        if gt_visible.is_empty() {
            gt_visible.push(visible[0][0].clone());
        }
        let gt_hallucination = rng
            .random_bool(0.6)
            .then(|| GT_HALLUCINATION_POOL.choose(&mut rng).unwrap().to_string());
        let mention_structured = rng.random_bool(0.5);

        let bedrooms_phrase = count_phrase(bedrooms, "bedrooms");
        let bathrooms_phrase = count_phrase(bathrooms, "bathrooms");
        let mut sentences: Vec<String> = gt_visible.iter().map(|f| format!("This home features {f}.")).collect();
        sentences.push(format!("It has {bedrooms_phrase}."));
        if let Some(h) = &gt_hallucination {
            sentences.push(format!("Buyers will love the {h}."));
        }
        if mention_structured {
            sentences.push(format!("It comes with {structured_feature}."));
        }
        sentences.shuffle(&mut rng);

        let mut gt_mentions: BTreeSet<String> = gt_visible.iter().cloned().collect();
        gt_mentions.insert(bedrooms_phrase.clone());
        gt_mentions.extend(gt_hallucination.clone());
        if mention_structured {
            gt_mentions.insert(structured_feature.to_owned());
        }
        let structured_supported: BTreeSet<String> = [
            bedrooms_phrase.clone(),
            bathrooms_phrase.clone(),
            structured_feature.to_owned(),
        ]
        .into();

        let salient_keys: BTreeSet<&str> = gt_visible
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(structured_feature))
            .collect();
        let images = visible
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s: Vec<&String> = v.iter().filter(|f| salient_keys.contains(f.as_str())).collect();
                let manifest = MockManifest::new(v, &s.into_iter().cloned().collect::<Vec<_>>())
                    .expect("generated manifest is valid");
                ImageRef::new(format!("{record_id}-img{i}"), format!("mock:{record_id}/{i}")).with_manifest(manifest)
            })
            .collect();
        records.push(MixedModalRecord {
            record_id: record_id.clone(),
            structured: StructuredData::Kg(vec![
                Triple::new("house", "hasBedrooms", bedrooms.to_string()),
                Triple::new("house", "hasBathrooms", bathrooms.to_string()),
                Triple::new("house", "locatedIn", suburb),
                Triple::new("house", "hasFeature", structured_feature),
            ]),
            images,
            ground_truth_text: Some(sentences.join(" ")),
        });
        truth.push(RecordTruth {
            record_id,
            gt_mentions,
            structured_supported,
        });
    }

    let mut vocabulary: Vec<String> = VISIBLE_POOL
        .iter()
        .chain(GT_HALLUCINATION_POOL)
        .chain(STRUCTURED_POOL)
        .chain(DRAFT_HALLUCINATION_POOL)
        .map(|s| s.to_string())
        .collect();
    for n in 1..=5 {
        vocabulary.push(count_phrase(n, "bedrooms"));
        vocabulary.push(count_phrase(n, "bathrooms"));
    }
    let settings = MockSettings {
        hallucination_pool: DRAFT_HALLUCINATION_POOL.iter().map(|s| s.to_string()).collect(),
        hallucinations_per_image: 1,
        omit_salient_modulo: 3,
        ..MockSettings::default()
    };
    SynthCorpus {
        records,
        truth,
        settings,
        vocabulary,
    }
}

/// Brute-force labels taken straight from manifests and planted truth,
/// sharing no code with the builder.
pub mod oracle {
    use std::collections::BTreeSet;

    use super::RecordTruth;
    use crate::model::{FeatureLabel, MixedModalRecord};

    /// Vocabulary phrases occurring in `text` at word boundaries.
    pub fn mentions(vocabulary: &[String], text: &str) -> BTreeSet<String> {
        let lower: String = text.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut out = BTreeSet::new();
        for phrase in vocabulary {
            let p: Vec<char> = phrase.chars().collect();
            if p.is_empty() || p.len() > chars.len() {
                continue;
            }
            for start in 0..=chars.len() - p.len() {
                let end = start + p.len();
                let left_ok = start == 0 || !chars[start - 1].is_alphanumeric();
                let right_ok = end == chars.len() || !chars[end].is_alphanumeric();
                if left_ok && right_ok && chars[start..end] == p[..] {
                    out.insert(phrase.clone());
                    break;
                }
            }
        }
        out
    }

    pub fn visible_anywhere(record: &MixedModalRecord, key: &str) -> bool {
        record
            .images
            .iter()
            .any(|i| i.manifest.as_ref().is_some_and(|m| m.visible.iter().any(|v| v == key)))
    }

    /// None for features that are not visible but supported by the
    /// structured data; those get no training label.
    pub fn label(record: &MixedModalRecord, truth: &RecordTruth, key: &str) -> Option<FeatureLabel> {
        let supported = truth.structured_supported.contains(key);
        if !visible_anywhere(record, key) {
            return (!supported).then_some(FeatureLabel::Hallucinated);
        }
        if truth.gt_mentions.contains(key) || supported {
            Some(FeatureLabel::Salient)
        } else {
            Some(FeatureLabel::NonSalient)
        }
    }

    /// Images a labeled feature is paired with.
    pub fn images_for(record: &MixedModalRecord, key: &str, label: FeatureLabel) -> Vec<String> {
        record
            .images
            .iter()
            .filter(|i| {
                label == FeatureLabel::Hallucinated
                    || i.manifest.as_ref().is_some_and(|m| m.visible.iter().any(|v| v == key))
            })
            .map(|i| i.id.clone())
            .collect()
    }

    /// Every manifest-salient key of the record.
    pub fn salient_keys(record: &MixedModalRecord) -> BTreeSet<String> {
        record
            .images
            .iter()
            .filter_map(|i| i.manifest.as_ref())
            .flat_map(|m| m.salient.iter().cloned())
            .collect()
    }

    /// Mentioned features that are neither visible nor supported.
    pub fn hallucinations(
        record: &MixedModalRecord,
        truth: &RecordTruth,
        mentioned: &BTreeSet<String>,
    ) -> BTreeSet<String> {
        mentioned
            .iter()
            .filter(|k| !visible_anywhere(record, k) && !truth.structured_supported.contains(*k))
            .cloned()
            .collect()
    }
}
