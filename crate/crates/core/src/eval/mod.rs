//! Ground-truth preprocessing, metrics and report tables.

pub mod metrics;
pub mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::gateway::{Gateway, GatewayError, ModelRole};
use crate::linearize::linearize;
use crate::model::{Feature, FeatureLabel, FeatureOrigin, GeneratedText, ImageRef, MixedModalRecord};
use crate::pipeline::{AlignmentMode, Pipeline, PipelineError};
use crate::postedit;
use crate::prompt::{bindings, format_numbered, TemplateId};
use crate::text::tokenize;
use crate::trainset;

pub use metrics::{bleu, meteor, rouge_l, round2, sentence_bleu, BleuStats, MetricError};
pub use report::{EvalReport, ReportRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Bleu,
    Meteor,
    RougeL,
    Bertscore,
    ClipScore,
    SbertSim,
    Accuracy,
}

impl MetricName {
    pub const ALL: [MetricName; 7] = [
        MetricName::Bleu,
        MetricName::Meteor,
        MetricName::RougeL,
        MetricName::Bertscore,
        MetricName::ClipScore,
        MetricName::SbertSim,
        MetricName::Accuracy,
    ];

    /// Columns of the generation tables.
    pub const TEXT: [MetricName; 5] = [
        MetricName::Bleu,
        MetricName::Meteor,
        MetricName::RougeL,
        MetricName::Bertscore,
        MetricName::ClipScore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Bleu => "bleu",
            MetricName::Meteor => "meteor",
            MetricName::RougeL => "rouge_l",
            MetricName::Bertscore => "bertscore",
            MetricName::ClipScore => "clip_score",
            MetricName::SbertSim => "sbert_sim",
            MetricName::Accuracy => "accuracy",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            MetricName::Bleu => "BLEU",
            MetricName::Meteor => "METEOR",
            MetricName::RougeL => "ROUGE-L",
            MetricName::Bertscore => "BERTScore",
            MetricName::ClipScore => "CLIPScore",
            MetricName::SbertSim => "SBERT",
            MetricName::Accuracy => "Accuracy",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub name: MetricName,
    pub value: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn clamp100(x: f64) -> f64 {
    x.clamp(0.0, 100.0)
}

/// Greedy max-cosine matching of per-token embeddings, F1, no idf.
pub fn bertscore(gw: &Gateway, candidate: &str, reference: &str) -> Result<f64, EvalError> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Err(MetricError::EmptyInput.into());
    }
    let embed = |toks: &[String]| -> Result<Vec<_>, GatewayError> { toks.iter().map(|t| gw.embed_text(t)).collect() };
    let ce = embed(&c)?;
    let re = embed(&r)?;
    let directed = |a: &[crate::gateway::EmbeddingVector], b: &[crate::gateway::EmbeddingVector]| {
        a.iter()
            .map(|x| b.iter().map(|y| x.cosine(y)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / a.len() as f64
    };
    let p = directed(&ce, &re);
    let rec = directed(&re, &ce);
    if p + rec <= 0.0 {
        return Ok(0.0);
    }
    Ok(clamp100(100.0 * 2.0 * p * rec / (p + rec)))
}

/// Mean over images of w·max(cos, 0)·100.
pub fn clip_score(gw: &Gateway, text: &str, images: &[ImageRef], weight: f64) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(MetricError::EmptyInput.into());
    }
    let t = gw.embed_text(text)?;
    let mut sum = 0.0;
    for img in images {
        let e = gw.embed_image(img)?;
        sum += clip_from_cosine(e.cosine(&t), weight);
    }
    Ok(sum / images.len() as f64)
}

pub fn clip_from_cosine(cos: f64, weight: f64) -> f64 {
    clamp100(weight * cos.max(0.0) * 100.0)
}

/// The string a feature list is embedded as: sorted displays joined by "; ".
pub fn feature_list_text<S: AsRef<str>>(features: &[S]) -> String {
    let mut d: Vec<&str> = features.iter().map(|f| f.as_ref()).collect();
    d.sort_unstable();
    d.join("; ")
}

pub fn sbert_similarity<A: AsRef<str>, B: AsRef<str>>(gw: &Gateway, a: &[A], b: &[B]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput.into());
    }
    let ea = gw.embed_text(&feature_list_text(a))?;
    let eb = gw.embed_text(&feature_list_text(b))?;
    Ok(clamp100(100.0 * ea.cosine(&eb)))
}

/// Per gold class, percent correct rounded to two decimals. Classes
/// absent from the golds are omitted.
pub fn classification_accuracy(
    predictions: &[(FeatureLabel, FeatureLabel)],
) -> Result<BTreeMap<FeatureLabel, f64>, MetricError> {
    if predictions.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut counts: BTreeMap<FeatureLabel, (u64, u64)> = BTreeMap::new();
    for &(gold, pred) in predictions {
        let e = counts.entry(gold).or_default();
        e.1 += 1;
        if gold == pred {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(l, (ok, n))| (l, round2(100.0 * ok as f64 / n as f64)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaithfulGt {
    pub record_id: String,
    pub faithful_features: Vec<String>,
    pub paragraph: String,
}

/// Keep ground-truth features that are visible or supported by the
/// structured data, then regenerate a paragraph from them.
pub fn preprocess_ground_truth(p: &Pipeline, record: &MixedModalRecord) -> Result<FaithfulGt, PipelineError> {
    let gt = record
        .ground_truth_text
        .as_deref()
        .ok_or_else(|| PipelineError::Invalid(format!("record {} has no ground_truth_text", record.record_id)))?;
    let features = postedit::extract_features(p, gt, None, FeatureOrigin::GroundTruthText)?;
    let (_, not_visible) = trainset::partition_visibility(p, &features, &record.images)?;
    let faithful: Vec<Feature> = match p.settings.alignment {
        AlignmentMode::Llm => {
            let d = |f: &[Feature]| format_numbered(&f.iter().map(|x| x.display.as_str()).collect::<Vec<_>>());
            let b = bindings([
                ("features", &d(&features)),
                ("not_visible", &d(&not_visible)),
                ("structured", &linearize(&record.structured).text),
            ]);
            let kept = p.ask_list(
                ModelRole::ExtractorLlm,
                TemplateId::GtFaithfulFeatures,
                &b,
                &[],
                FeatureOrigin::GroundTruthText,
            )?;
            features
                .into_iter()
                .filter(|f| kept.iter().any(|k| k.key == f.key))
                .collect()
        }
        AlignmentMode::Fallback => {
            let hallucinated = trainset::filter_hallucinated(p, &not_visible, &record.structured)?;
            features
                .into_iter()
                .filter(|f| !hallucinated.contains(&f.key))
                .collect()
        }
    };
    let displays: Vec<String> = faithful.iter().map(|f| f.display.clone()).collect();
    let b = bindings([("features", &format_numbered(&displays))]);
    let (paragraph, _) = p.ask(ModelRole::EditorLlm, TemplateId::GtParagraph, &b, &[])?;
    let paragraph = paragraph.trim().to_owned();
    if paragraph.is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }
    Ok(FaithfulGt {
        record_id: record.record_id.clone(),
        faithful_features: displays,
        paragraph,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    bleu: BleuStats,
    meteor: f64,
    rouge: f64,
    n: usize,
}

/// Corpus scores of `texts` against `references`, aligned by position.
/// Embedding metrics are `None` when their embedder is not routed.
pub fn score_corpus(
    p: &Pipeline,
    records: &[MixedModalRecord],
    texts: &[GeneratedText],
    references: &[String],
) -> Result<BTreeMap<MetricName, Option<f64>>, EvalError> {
    if texts.len() != references.len() || texts.len() != records.len() {
        return Err(MetricError::LengthMismatch {
            candidates: texts.len(),
            references: references.len(),
        }
        .into());
    }
    if texts.is_empty() {
        return Err(MetricError::EmptyCorpus.into());
    }
    let idx: Vec<usize> = (0..texts.len()).collect();
    let sums = exec::map_reduce(
        p.exec(),
        &idx,
        Sums::default(),
        |&i| Sums {
            bleu: BleuStats::of(&texts[i].text, &references[i]),
            meteor: meteor(&texts[i].text, &references[i]),
            rouge: rouge_l(&texts[i].text, &references[i]),
            n: 1,
        },
        |a, b| Sums {
            bleu: a.bleu.merge(b.bleu),
            meteor: a.meteor + b.meteor,
            rouge: a.rouge + b.rouge,
            n: a.n + b.n,
        },
    );
    let n = sums.n as f64;
    let mut out = BTreeMap::new();
    out.insert(MetricName::Bleu, Some(sums.bleu.score()));
    out.insert(MetricName::Meteor, Some(sums.meteor / n));
    out.insert(MetricName::RougeL, Some(sums.rouge / n));
    let gw = &p.gateway;
    let bert = if gw.has_route(ModelRole::TextEmbedder) {
        let v: Result<Vec<f64>, EvalError> =
            exec::map(p.exec(), &idx, |&i| bertscore(gw, &texts[i].text, &references[i]))
                .into_iter()
                .collect();
        Some(v?.iter().sum::<f64>() / n)
    } else {
        None
    };
    out.insert(MetricName::Bertscore, bert);
    let clip = if gw.has_route(ModelRole::TextEmbedder) && gw.has_route(ModelRole::ImageEmbedder) {
        let v: Result<Vec<f64>, EvalError> = exec::map(p.exec(), &idx, |&i| {
            clip_score(gw, &texts[i].text, &records[i].images, p.settings.clip_weight)
        })
        .into_iter()
        .collect();
        Some(v?.iter().sum::<f64>() / n)
    } else {
        None
    };
    out.insert(MetricName::ClipScore, clip);
    Ok(out)
}
