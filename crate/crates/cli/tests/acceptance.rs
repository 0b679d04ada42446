//! One PASS/FAIL line per acceptance criterion. Tolerances are pinned
//! below. Run with `cargo test -p visicrit-cli --test acceptance -- --nocapture`.

mod common;

#[path = "../../core/tests/support/metric_oracle.rs"]
mod metric_oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use visicrit_cli::serve::{self, ManifestIndex};
use visicrit_core::eval::metrics::{meteor, rouge_l};
use visicrit_core::eval::report::EvalReport;
use visicrit_core::eval::{classification_accuracy, MetricName};
use visicrit_core::exec::ExecMode;
use visicrit_core::gateway::conformance;
use visicrit_core::gateway::image::load_local_image_bytes;
use visicrit_core::gateway::{Cache, Gateway};
use visicrit_core::model::{FeatureLabel, TextVariant};
use visicrit_core::pipeline::{Pipeline, PipelineSettings};
use visicrit_core::postedit::{self, EditVariant};
use visicrit_core::prompt::TemplateSet;
use visicrit_core::synth::{self, oracle, SynthCorpus, SynthOptions};
use visicrit_core::trainset;

const ORACLE_TOL: f64 = 1e-9;
const MIN_ORACLE_CASES: usize = 20;
const ROUGE_ABCD: f64 = 75.0;
const METEOR_IDENTITY: f64 = 98.15;
const METEOR_TOL: f64 = 0.01;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const E2E_RECORDS: usize = 20;
const E2E_BUDGET: Duration = Duration::from_secs(30);
const MIN_LABELED_FEATURES: usize = 200;
const SPLIT_RATIO: f64 = 0.87;
const HALLUCINATED_CORRECT: usize = 9612;
const HALLUCINATED_TOTAL: usize = 10_000;
const ACCURACY_EXPECTED: f64 = 96.12;
const FUZZ_VALID: usize = 1000;
const FUZZ_INVALID: usize = 100;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mock_pipeline(corpus: &SynthCorpus, exec: ExecMode) -> Pipeline {
    let templates = Arc::new(TemplateSet::builtin());
    let world = Arc::new(corpus.world(templates.clone()));
    let gw = Gateway::new(Cache::in_memory()).route_all(world, 1);
    Pipeline::new(
        gw,
        templates,
        PipelineSettings {
            exec,
            ..PipelineSettings::default()
        },
    )
}

fn metric_oracles() -> Check {
    let t = Instant::now();
    let cases = metric_oracle::cases();
    ensure(cases.len() >= MIN_ORACLE_CASES, || {
        format!("only {} cases", cases.len())
    })?;
    let mut worst = 0.0f64;
    for c in &cases {
        let (lib, orc) = c.evaluate();
        let d = (lib - orc).abs();
        worst = worst.max(d);
        ensure(d <= ORACLE_TOL, || {
            format!("{}: library {lib} vs oracle {orc}", c.name())
        })?;
    }
    let r = rouge_l("a b c d", "a c b d");
    ensure((r - ROUGE_ABCD).abs() <= ORACLE_TOL, || format!("rouge_l = {r}"))?;
    let m = meteor("the cat sat", "the cat sat");
    ensure((m - METEOR_IDENTITY).abs() <= METEOR_TOL, || {
        format!("meteor identity = {m}")
    })?;
    let el = t.elapsed();
    ensure(el < METRIC_BUDGET, || format!("took {el:?}"))?;
    Ok(format!(
        "{} cases, max |Δ| {worst:.1e} ≤ {ORACLE_TOL:e}; rouge_l {r:.2}; meteor {m:.2}; {:.2}s",
        cases.len(),
        el.as_secs_f64()
    ))
}

fn mock_world_end_to_end() -> Check {
    let t = Instant::now();
    let corpus = synth::generate(SynthOptions {
        records: E2E_RECORDS,
        ..SynthOptions::default()
    });
    let p = mock_pipeline(&corpus, ExecMode::Parallel);
    let (mut pruned_keys, mut appended) = (0, 0);
    for (rec, truth) in corpus.records.iter().zip(&corpus.truth) {
        let edits = postedit::run_variants(&p, rec, &EditVariant::ALL).map_err(|e| e.to_string())?;
        let combined = &edits.variant(EditVariant::Combined).unwrap().text;
        let mentioned = oracle::mentions(&corpus.vocabulary, combined);
        let hal = oracle::hallucinations(rec, truth, &mentioned);
        ensure(hal.is_empty(), || format!("{}: hallucinated {hal:?}", rec.record_id))?;
        let missing: Vec<_> = oracle::salient_keys(rec)
            .into_iter()
            .filter(|k| !mentioned.contains(k))
            .collect();
        ensure(missing.is_empty(), || format!("{}: missing {missing:?}", rec.record_id))?;

        let pruned = &edits.variant(EditVariant::Pruned).unwrap().text;
        let after = oracle::mentions(&corpus.vocabulary, pruned);
        for e in &edits.feedback.erroneous {
            ensure(!after.contains(&e.feature.key), || {
                format!("{}: pruned still has {}", rec.record_id, e.feature.key)
            })?;
        }
        let (p1, _) = postedit::prune(&p, &edits.draft.text, &edits.feedback.erroneous).map_err(|e| e.to_string())?;
        let (c1, _) = postedit::append(&p, &p1, &edits.feedback.missing_salient).map_err(|e| e.to_string())?;
        ensure(&c1 == combined, || {
            format!("{}: combined ≠ append∘prune", rec.record_id)
        })?;
        pruned_keys += edits.feedback.erroneous.len();
        appended += edits.feedback.missing_salient.len();
    }
    ensure(pruned_keys > 0 && appended > 0, || {
        "feedback never triggered an edit".into()
    })?;
    let el = t.elapsed();
    ensure(el < E2E_BUDGET, || format!("took {el:?}"))?;
    Ok(format!(
        "{E2E_RECORDS} records, 0 hallucinated, 0 missing; {pruned_keys} pruned, {appended} appended; {:.2}s",
        el.as_secs_f64()
    ))
}

fn trainset_soundness() -> Check {
    let corpus = synth::generate(SynthOptions {
        records: 30,
        ..SynthOptions::default()
    });
    let p = mock_pipeline(&corpus, ExecMode::Parallel);
    let build = trainset::build(&p, &corpus.records, SPLIT_RATIO, 11).map_err(|e| e.to_string())?;
    ensure(build.manifest.failed_records.is_empty(), || "records failed".into())?;
    let mut labeled = 0;
    let mut classes = BTreeSet::new();
    for ((rec, truth), rb) in corpus.records.iter().zip(&corpus.truth).zip(&build.records) {
        for inv in [&rb.ground_truth, &rb.generated] {
            inv.check().map_err(|e| format!("{}: {e}", rec.record_id))?;
        }
        let mentioned: BTreeSet<String> = truth
            .gt_mentions
            .union(&oracle::mentions(&corpus.vocabulary, &rb.draft))
            .cloned()
            .collect();
        let mut expected = BTreeSet::new();
        for key in &mentioned {
            if let Some(label) = oracle::label(rec, truth, key) {
                labeled += 1;
                classes.insert(label);
                for img in oracle::images_for(rec, key, label) {
                    expected.insert((img, key.clone(), label));
                }
            }
        }
        let got: BTreeSet<(String, String, FeatureLabel)> = rb
            .classification
            .iter()
            .map(|e| (e.image_id.clone(), e.feature.key.clone(), e.label))
            .collect();
        ensure(got == expected, || {
            format!("{}: labels differ from oracle", rec.record_id)
        })?;
    }
    ensure(labeled >= MIN_LABELED_FEATURES, || {
        format!("only {labeled} labeled features")
    })?;
    ensure(classes.len() == 3, || format!("classes {classes:?}"))?;

    let items: Vec<u32> = (0..100).collect();
    let a = trainset::stratified_split(items.clone(), |_| "c".into(), SPLIT_RATIO, 3);
    let b = trainset::stratified_split(items, |_| "c".into(), SPLIT_RATIO, 3);
    ensure((a.train.len(), a.val.len()) == (87, 13), || {
        format!("split {}/{}", a.train.len(), a.val.len())
    })?;
    ensure(a == b, || "split differs across reruns".into())?;
    Ok(format!(
        "{labeled} features = oracle over 3 classes; partitions hold on {} records; split 87/13 stable",
        corpus.records.len()
    ))
}

const FULL_RUN: &[&[&str]] = &[
    &["ingest"],
    &["generate"],
    &["feedback"],
    &["edit", "--variant", "pruned"],
    &["edit", "--variant", "appended"],
    &["edit", "--variant", "combined"],
    &["build-trainset"],
    &["preprocess-gt"],
    &["eval"],
];

fn backend_calls(tree: &BTreeMap<String, Vec<u8>>) -> Result<u64, String> {
    let mut total = 0;
    for (name, bytes) in tree.iter().filter(|(n, _)| n.ends_with(".run.json")) {
        let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| format!("{name}: {e}"))?;
        // Ingest never opens a gateway.
        if v["command"] == "ingest" && v["cache"].is_null() {
            continue;
        }
        total += v["cache"]["backend_calls"]
            .as_u64()
            .ok_or_else(|| format!("{name}: no call counter"))?;
    }
    Ok(total)
}

fn determinism() -> Check {
    let ws = common::workspace(8, 5, |_| {});
    let run_all = || -> Result<BTreeMap<String, Vec<u8>>, String> {
        for args in FULL_RUN {
            ensure(ws.run(args) == 0, || format!("{args:?} failed"))?;
        }
        Ok(common::tree(&ws.out()))
    };
    let cold = run_all()?;
    let cold_calls = backend_calls(&cold)?;
    ensure(cold_calls > 0, || "cold run made no backend calls".into())?;
    let warm1 = run_all()?;
    let warm2 = run_all()?;
    ensure(warm1 == warm2, || {
        let diff: Vec<_> = warm1.keys().filter(|k| warm1.get(*k) != warm2.get(*k)).collect();
        format!("warm trees differ: {diff:?}")
    })?;
    let no_manifest = |t: &BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        t.iter()
            .filter(|(k, _)| !k.ends_with(".run.json"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    ensure(no_manifest(&cold) == no_manifest(&warm1), || {
        "cold and warm outputs differ".into()
    })?;
    for (i, t) in [&warm1, &warm2].into_iter().enumerate() {
        let calls = backend_calls(t)?;
        ensure(calls == 0, || format!("warm run {} made {calls} backend calls", i + 1))?;
    }
    Ok(format!(
        "{} files byte-identical over 2 warm runs; backend calls cold {cold_calls}, warm 0",
        warm1.len()
    ))
}

fn reporting() -> Check {
    let mut preds = Vec::with_capacity(HALLUCINATED_TOTAL);
    for i in 0..HALLUCINATED_TOTAL {
        let pred = if i < HALLUCINATED_CORRECT {
            FeatureLabel::Hallucinated
        } else {
            FeatureLabel::Salient
        };
        preds.push((FeatureLabel::Hallucinated, pred));
    }
    let acc = classification_accuracy(&preds).map_err(|e| e.to_string())?;
    let got = acc[&FeatureLabel::Hallucinated];
    ensure(got == ACCURACY_EXPECTED, || format!("accuracy {got}"))?;

    let cols = vec![MetricName::Bleu, MetricName::Meteor, MetricName::RougeL];
    let mut r = EvalReport::new("fixture", 0, cols.clone());
    let row = |v: [f64; 3]| -> BTreeMap<MetricName, Option<f64>> { cols.iter().copied().zip(v.map(Some)).collect() };
    r.push("gpt", TextVariant::Draft, row([10.0, 40.004, 30.0]));
    r.push("gpt", TextVariant::Pruned, row([12.5, 40.0, 29.0]));
    r.push("gpt", TextVariant::Combined, row([12.5, 39.0, 31.0]));
    r.push("llava", TextVariant::Draft, row([5.0, 20.0, 15.0]));
    let want = vec![
        vec![false, true, false],
        vec![true, true, false],
        vec![true, false, true],
        vec![true, true, true],
    ];
    ensure(r.bold() == want, || format!("bold {:?}", r.bold()))?;
    Ok(format!(
        "{HALLUCINATED_CORRECT}/{HALLUCINATED_TOTAL} → {got:.2}; bolding per column and backbone with ties"
    ))
}

fn protocol() -> Check {
    let client = conformance::check_client(FUZZ_VALID, FUZZ_INVALID, 2024);
    ensure(client.valid == FUZZ_VALID && client.invalid == FUZZ_INVALID, || {
        format!("{client:?}")
    })?;
    ensure(client.passed(), || format!("client: {:?}", client.failures))?;

    let corpus = synth::generate(SynthOptions {
        records: 6,
        ..SynthOptions::default()
    });
    let server = serve::spawn(
        ManifestIndex::from_records(&corpus.records),
        "127.0.0.1:0".parse().unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let images: Vec<Vec<u8>> = corpus
        .records
        .iter()
        .flat_map(|r| &r.images)
        .map(|i| load_local_image_bytes(i).unwrap())
        .collect();
    let srv = conformance::check_server(&server.url(), &images, &corpus.vocabulary, FUZZ_VALID / 10, 2024);
    ensure(srv.passed(), || format!("server: {:?}", srv.failures))?;
    Ok(format!(
        "client {}/{} valid parsed, {}/{} invalid rejected; mock-serve {}/{} valid, {}/{} invalid rejected",
        client.valid_ok,
        client.valid,
        client.invalid_rejected,
        client.invalid,
        srv.valid_ok,
        srv.valid,
        srv.invalid_rejected,
        srv.invalid
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 6] = [
        ("metric oracle suite", metric_oracles),
        ("mock-world end-to-end", mock_world_end_to_end),
        ("trainset-builder soundness", trainset_soundness),
        ("determinism and caching", determinism),
        ("reporting arithmetic", reporting),
        ("protocol conformance", protocol),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
