//! Subcommand implementations. Every run writes its outputs plus a
//! `<command>.run.json` manifest into the configured output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _};
use serde_json::{json, Value};

use visicrit_core::eval::{self, report::EvalReport, MetricName};
use visicrit_core::exec::{self, ExecMode};
use visicrit_core::gateway::http::HttpBackend;
use visicrit_core::gateway::mock::MockWorld;
use visicrit_core::gateway::{Backend, Cache, Gateway, ModelRole};
use visicrit_core::model::{
    canonicalize_feature, read_records_file, write_records, FeatureLabel, FeatureOrigin, GeneratedText, ImageRef,
    MixedModalRecord, TextVariant,
};
use visicrit_core::pipeline::{Pipeline, PipelineError, PipelineSettings};
use visicrit_core::postedit::{self, EditVariant};
use visicrit_core::prompt::TemplateSet;
use visicrit_core::synth::{self, SynthOptions};
use visicrit_core::trainset::{self, MAX_FAILURE_RATE};

use crate::config::{BackendConfig, ConfigError, PipelineConfig};

pub const DRAFTS: &str = "drafts.jsonl";
pub const FEEDBACK: &str = "feedback.jsonl";
pub const FAITHFUL_GT: &str = "faithful_gt.jsonl";
pub const RECORDS: &str = "records.jsonl";
pub const SYNTHETIC_MOCK: &str = "synthetic.mock.json";
pub const TRAINSET_DIR: &str = "trainset";
pub const EVAL_TABLE: &str = "eval.table.txt";

pub fn edits_file(v: EditVariant) -> String {
    format!("edits.{v}.jsonl")
}

/// Failure that maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error(transparent)]
pub struct UsageError(#[from] pub ConfigError);

pub fn templates(cfg: &PipelineConfig) -> Result<Arc<TemplateSet>, UsageError> {
    let t = match &cfg.paths.templates_dir {
        Some(dir) => TemplateSet::load_dir(dir)
            .map_err(|e| ConfigError::Invalid(format!("templates in {}: {e}", dir.display())))?,
        None => TemplateSet::builtin(),
    };
    Ok(Arc::new(t))
}

pub fn exec_mode(cfg: &PipelineConfig) -> ExecMode {
    if cfg.workers == 1 {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn http_backend_id(h: &visicrit_core::gateway::http::HttpBackendConfig) -> String {
    match &h.model {
        Some(m) => format!("http:{}#{m}", h.endpoint),
        None => format!("http:{}", h.endpoint),
    }
}

/// Gateway with every configured role routed; mock roles share one world
/// built from the corpus manifests.
pub fn gateway(
    cfg: &PipelineConfig,
    templates: Arc<TemplateSet>,
    records: &[MixedModalRecord],
    cache: Cache,
) -> Gateway {
    let mut gw = Gateway::new(cache).with_hallucinated_rationale(cfg.hallucinated_rationale.clone());
    let mut world: Option<Arc<MockWorld>> = None;
    for (role, backend) in &cfg.backends {
        let b: Arc<dyn Backend> = match backend {
            BackendConfig::Mock => world
                .get_or_insert_with(|| Arc::new(MockWorld::from_records(templates.clone(), cfg.mock.clone(), records)))
                .clone(),
            BackendConfig::Http(h) => Arc::new(HttpBackend::new(http_backend_id(h), h.clone())),
        };
        gw = gw.route(*role, b, cfg.retries);
    }
    gw
}

pub fn pipeline(cfg: &PipelineConfig, records: &[MixedModalRecord]) -> anyhow::Result<Pipeline> {
    let templates = templates(cfg)?;
    let cache = Cache::open(&cfg.paths.cache_dir).with_context(|| "opening cache")?;
    let gw = gateway(cfg, templates.clone(), records, cache);
    let settings = PipelineSettings {
        tau_align: cfg.thresholds.tau_align,
        tau_sal: cfg.thresholds.tau_sal,
        alignment: cfg.alignment,
        exec: exec_mode(cfg),
        clip_weight: cfg.clip_weight,
    };
    Ok(Pipeline::new(gw, templates, settings))
}

pub fn load_corpus(cfg: &PipelineConfig) -> anyhow::Result<Vec<MixedModalRecord>> {
    let records = read_records_file(&cfg.paths.corpus, cfg.schema_mode)
        .with_context(|| format!("reading corpus {}", cfg.paths.corpus.display()))?;
    if records.is_empty() {
        bail!("corpus {} has no records", cfg.paths.corpus.display());
    }
    Ok(records)
}

fn write_jsonl(path: &Path, lines: impl IntoIterator<Item = Value>) -> anyhow::Result<()> {
    let mut out =
        std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

/// Run `f` on every record, dropping failures as long as they stay
/// within the tolerated rate.
fn per_record<R, F>(p: &Pipeline, records: &[MixedModalRecord], f: F) -> anyhow::Result<(Vec<R>, Vec<String>)>
where
    R: Send,
    F: Fn(&MixedModalRecord) -> Result<R, PipelineError> + Sync + Send,
{
    let results = exec::map(p.exec(), records, |r| {
        p.check_cancelled()?;
        f(r)
    });
    p.check_cancelled()?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("record {} failed: {e}", r.record_id);
                failed.push(r.record_id.clone());
            }
        }
    }
    if failed.len() as f64 > MAX_FAILURE_RATE * records.len() as f64 {
        return Err(PipelineError::TooManyFailures {
            failed: failed.len(),
            total: records.len(),
        }
        .into());
    }
    Ok((ok, failed))
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub records: usize,
    pub failed: Vec<String>,
    pub outputs: Vec<String>,
    pub extra: BTreeMap<String, Value>,
}

/// `<command>.run.json`: config digest, template digest, cache statistics
/// and the files written. Holds no timestamps so warm reruns match.
pub fn write_run_manifest(
    cfg: &PipelineConfig,
    command: &str,
    p: Option<&Pipeline>,
    summary: &RunSummary,
) -> anyhow::Result<PathBuf> {
    let (cache, templates) = match p {
        Some(p) => {
            let s = p.gateway.stats();
            (
                json!({
                    "entries": p.gateway.cache().len(),
                    "hits": s.cache_hits,
                    "misses": s.cache_misses,
                    "backend_calls": s.backend_calls,
                    "backend_failures": s.backend_failures,
                }),
                json!(p.templates.digest()),
            )
        }
        None => (Value::Null, Value::Null),
    };
    let backends: BTreeMap<&str, String> = cfg
        .backends
        .iter()
        .map(|(r, b)| {
            let id = match b {
                BackendConfig::Mock => visicrit_core::gateway::mock::MOCK_BACKEND_ID.to_owned(),
                BackendConfig::Http(h) => http_backend_id(h),
            };
            (r.as_str(), id)
        })
        .collect();
    let manifest = json!({
        "command": command,
        "config_digest": cfg.digest(),
        "templates_digest": templates,
        "backends": backends,
        "seed": cfg.seed,
        "records": summary.records,
        "failed_records": summary.failed,
        "outputs": summary.outputs,
        "cache": cache,
        "details": summary.extra,
    });
    let path = cfg.paths.output_dir.join(format!("{command}.run.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

fn out_dir(cfg: &PipelineConfig) -> anyhow::Result<&Path> {
    let d = cfg.paths.output_dir.as_path();
    fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

/// Validate the corpus and write it back normalized. With `synthetic`,
/// first replace the corpus with a generated mock-world corpus.
pub fn ingest(cfg: &PipelineConfig, synthetic: Option<(usize, u64)>) -> anyhow::Result<RunSummary> {
    let dir = out_dir(cfg)?;
    let mut summary = RunSummary::default();
    if let Some((n, seed)) = synthetic {
        let corpus = synth::generate(SynthOptions {
            records: n,
            seed,
            ..SynthOptions::default()
        });
        if let Some(parent) = cfg.paths.corpus.parent() {
            fs::create_dir_all(parent)?;
        }
        let f =
            fs::File::create(&cfg.paths.corpus).with_context(|| format!("creating {}", cfg.paths.corpus.display()))?;
        write_records(std::io::BufWriter::new(f), &corpus.records)?;
        let mut settings = corpus.settings.clone();
        settings.extra_vocabulary = corpus.vocabulary.clone();
        fs::write(
            dir.join(SYNTHETIC_MOCK),
            serde_json::to_string_pretty(&settings)? + "\n",
        )?;
        summary.outputs.push(SYNTHETIC_MOCK.into());
        summary.extra.insert("synthetic_seed".into(), json!(seed));
    }
    let records = load_corpus(cfg)?;
    let f = fs::File::create(dir.join(RECORDS))?;
    write_records(std::io::BufWriter::new(f), &records)?;
    summary.records = records.len();
    summary.outputs.push(RECORDS.into());
    let images: usize = records.iter().map(|r| r.images.len()).sum();
    let with_gt = records.iter().filter(|r| r.ground_truth_text.is_some()).count();
    summary.extra.insert("images".into(), json!(images));
    summary.extra.insert("with_ground_truth".into(), json!(with_gt));
    write_run_manifest(cfg, "ingest", None, &summary)?;
    Ok(summary)
}

pub fn generate(cfg: &PipelineConfig, p: &Pipeline, records: &[MixedModalRecord]) -> anyhow::Result<RunSummary> {
    let dir = out_dir(cfg)?;
    let (drafts, failed) = per_record(p, records, |r| postedit::draft(p, r))?;
    write_jsonl(
        &dir.join(DRAFTS),
        drafts.iter().map(|d| serde_json::to_value(d).unwrap()),
    )?;
    let summary = RunSummary {
        records: records.len(),
        failed,
        outputs: vec![DRAFTS.into()],
        ..RunSummary::default()
    };
    write_run_manifest(cfg, "generate", Some(p), &summary)?;
    Ok(summary)
}

pub fn feedback(cfg: &PipelineConfig, p: &Pipeline, records: &[MixedModalRecord]) -> anyhow::Result<RunSummary> {
    let dir = out_dir(cfg)?;
    let (lines, failed) = per_record(p, records, |r| {
        let d = postedit::draft(p, r)?;
        let fb = postedit::collect_feedback(p, &d.text, r)?;
        Ok(postedit::feedback_line(&r.record_id, &d.text, &fb))
    })?;
    write_jsonl(&dir.join(FEEDBACK), lines)?;
    let summary = RunSummary {
        records: records.len(),
        failed,
        outputs: vec![FEEDBACK.into()],
        ..RunSummary::default()
    };
    write_run_manifest(cfg, "feedback", Some(p), &summary)?;
    Ok(summary)
}

pub fn edit(
    cfg: &PipelineConfig,
    p: &Pipeline,
    records: &[MixedModalRecord],
    variant: EditVariant,
) -> anyhow::Result<RunSummary> {
    let dir = out_dir(cfg)?;
    let (lines, failed) = per_record(p, records, |r| {
        let edits = postedit::run_variants(p, r, &[variant])?;
        Ok(postedit::edit_line(&edits.variants[0], &edits.feedback))
    })?;
    let name = edits_file(variant);
    write_jsonl(&dir.join(&name), lines)?;
    let summary = RunSummary {
        records: records.len(),
        failed,
        outputs: vec![name],
        ..RunSummary::default()
    };
    write_run_manifest(cfg, &format!("edit.{variant}"), Some(p), &summary)?;
    Ok(summary)
}

pub fn build_trainset(cfg: &PipelineConfig, p: &Pipeline, records: &[MixedModalRecord]) -> anyhow::Result<RunSummary> {
    let dir = out_dir(cfg)?.join(TRAINSET_DIR);
    let build = trainset::build(p, records, cfg.split_ratio, cfg.seed)?;
    trainset::write_outputs(&dir, &build)?;
    let mut summary = RunSummary {
        records: records.len(),
        failed: build.manifest.failed_records.clone(),
        outputs: [
            trainset::CLASSIFICATION_TRAIN,
            trainset::CLASSIFICATION_VAL,
            trainset::SALIENT_TRAIN,
            trainset::SALIENT_VAL,
            trainset::MANIFEST,
        ]
        .iter()
        .map(|f| format!("{TRAINSET_DIR}/{f}"))
        .collect(),
        ..RunSummary::default()
    };
    summary
        .extra
        .insert("trainer".into(), serde_json::to_value(&cfg.trainer)?);
    write_run_manifest(cfg, "build-trainset", Some(p), &summary)?;
    Ok(summary)
}

pub fn preprocess_gt(cfg: &PipelineConfig, p: &Pipeline, records: &[MixedModalRecord]) -> anyhow::Result<RunSummary> {
    let dir = out_dir(cfg)?;
    let (gts, failed) = per_record(p, records, |r| eval::preprocess_ground_truth(p, r))?;
    write_jsonl(
        &dir.join(FAITHFUL_GT),
        gts.iter().map(|g| serde_json::to_value(g).unwrap()),
    )?;
    let summary = RunSummary {
        records: records.len(),
        failed,
        outputs: vec![FAITHFUL_GT.into()],
        ..RunSummary::default()
    };
    write_run_manifest(cfg, "preprocess-gt", Some(p), &summary)?;
    Ok(summary)
}

fn read_jsonl(path: &Path) -> anyhow::Result<Vec<Value>> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn image_index(records: &[MixedModalRecord]) -> BTreeMap<&str, &ImageRef> {
    records
        .iter()
        .flat_map(|r| r.images.iter())
        .map(|i| (i.id.as_str(), i))
        .collect()
}

fn field<'a>(v: &'a Value, key: &str, path: &Path) -> anyhow::Result<&'a Value> {
    v.get(key)
        .with_context(|| format!("{}: line without {key:?}", path.display()))
}

/// Critic accuracy per gold class on a classification JSONL file.
pub fn critic_accuracy(
    p: &Pipeline,
    records: &[MixedModalRecord],
    path: &Path,
) -> anyhow::Result<BTreeMap<FeatureLabel, f64>> {
    let images = image_index(records);
    let mut items = Vec::new();
    for line in read_jsonl(path)? {
        let id = field(&line, "image_id", path)?.as_str().unwrap_or_default();
        let img = *images
            .get(id)
            .with_context(|| format!("image {id:?} is not in the corpus"))?;
        let feature = canonicalize_feature(
            field(&line, "feature", path)?.as_str().unwrap_or_default(),
            FeatureOrigin::GeneratedText,
        )?;
        let gold: FeatureLabel = serde_json::from_value(field(&line, "label", path)?.clone())?;
        items.push((img.clone(), feature, gold));
    }
    let preds: Result<Vec<(FeatureLabel, FeatureLabel)>, _> = exec::map(p.exec(), &items, |(img, f, gold)| {
        p.gateway
            .classify_feature(std::slice::from_ref(img), f)
            .map(|v| (*gold, v.label))
    })
    .into_iter()
    .collect();
    Ok(eval::classification_accuracy(&preds?)?)
}

/// Mean SBERT similarity between critic salient lists and gold lists.
pub fn critic_salient_similarity(p: &Pipeline, records: &[MixedModalRecord], path: &Path) -> anyhow::Result<f64> {
    let images = image_index(records);
    let mut items = Vec::new();
    for line in read_jsonl(path)? {
        let id = field(&line, "image_id", path)?.as_str().unwrap_or_default();
        let img = *images
            .get(id)
            .with_context(|| format!("image {id:?} is not in the corpus"))?;
        let gold: Vec<String> = serde_json::from_value(field(&line, "salient_features", path)?.clone())?;
        items.push((img.clone(), gold));
    }
    if items.is_empty() {
        bail!("{} has no salient lists", path.display());
    }
    let scores: Result<Vec<f64>, anyhow::Error> = exec::map(p.exec(), &items, |(img, gold)| {
        let pred = p.gateway.list_salient(img)?;
        let pred: Vec<&str> = pred.iter().map(|f| f.display.as_str()).collect();
        if pred.is_empty() {
            return Ok(0.0);
        }
        Ok(eval::sbert_similarity(&p.gateway, &pred, gold)?)
    })
    .into_iter()
    .collect();
    let scores = scores?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Default, Clone)]
pub struct EvalOptions {
    pub classification: Option<PathBuf>,
    pub salient: Option<PathBuf>,
}

struct EvalRecord {
    record: MixedModalRecord,
    reference: String,
    texts: Vec<GeneratedText>,
}

pub fn evaluate(
    cfg: &PipelineConfig,
    p: &Pipeline,
    records: &[MixedModalRecord],
    opts: &EvalOptions,
) -> anyhow::Result<(EvalReport, RunSummary)> {
    let dir = out_dir(cfg)?;
    let (rows, failed) = per_record(p, records, |r| {
        let gt = eval::preprocess_ground_truth(p, r)?;
        let edits = postedit::run_variants(p, r, &EditVariant::ALL)?;
        let mut texts = vec![edits.draft.clone()];
        texts.extend(edits.variants);
        Ok(EvalRecord {
            record: r.clone(),
            reference: gt.paragraph,
            texts,
        })
    })?;
    if rows.is_empty() {
        bail!("no record could be evaluated");
    }
    let scored: Vec<MixedModalRecord> = rows.iter().map(|r| r.record.clone()).collect();
    let references: Vec<String> = rows.iter().map(|r| r.reference.clone()).collect();

    let mut report = EvalReport::new(cfg.corpus_id.clone(), cfg.seed, MetricName::TEXT.to_vec());
    for role in ModelRole::ALL {
        if let Some(id) = p.gateway.backend_id(role) {
            report.backends.insert(role.as_str().to_owned(), id.to_owned());
        }
    }
    let backbone = cfg.backbone();
    let variants = [
        TextVariant::Draft,
        TextVariant::Pruned,
        TextVariant::Appended,
        TextVariant::Combined,
    ];
    for (i, v) in variants.into_iter().enumerate() {
        let texts: Vec<GeneratedText> = rows.iter().map(|r| r.texts[i].clone()).collect();
        debug_assert!(texts.iter().all(|t| t.variant == v));
        let values = eval::score_corpus(p, &scored, &texts, &references)?;
        report.push(backbone.clone(), v, values);
    }

    let mut summary = RunSummary {
        records: records.len(),
        failed,
        ..RunSummary::default()
    };
    for (label, lines) in report.row_lines() {
        let name = report.file_name(label);
        write_jsonl(&dir.join(&name), lines)?;
        summary.outputs.push(name);
    }
    let mut table = report.render_table();
    if let Some(path) = &opts.classification {
        let acc = critic_accuracy(p, records, path)?;
        let name = format!("{}.accuracy.report", cfg.corpus_id);
        let line = json!({
            "corpus": cfg.corpus_id,
            "seed": cfg.seed,
            "metric": MetricName::Accuracy.as_str(),
            "per_label": acc.iter().map(|(l, v)| (l.as_str(), *v)).collect::<BTreeMap<_, _>>(),
        });
        write_jsonl(&dir.join(&name), [line])?;
        summary.outputs.push(name);
        table.push('\n');
        for (l, v) in &acc {
            table.push_str(&format!("accuracy[{}]  {v:.2}\n", l.as_str()));
        }
    }
    if let Some(path) = &opts.salient {
        let s = critic_salient_similarity(p, records, path)?;
        let name = format!("{}.sbert.report", cfg.corpus_id);
        let line = json!({
            "corpus": cfg.corpus_id,
            "seed": cfg.seed,
            "metric": MetricName::SbertSim.as_str(),
            "value": s,
        });
        write_jsonl(&dir.join(&name), [line])?;
        summary.outputs.push(name);
        table.push_str(&format!("{}  {s:.2}\n", MetricName::SbertSim.header()));
    }
    fs::write(dir.join(EVAL_TABLE), &table)?;
    summary.outputs.push(EVAL_TABLE.into());
    write_run_manifest(cfg, "eval", Some(p), &summary)?;
    Ok((report, summary))
}
