use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use visicrit_core::exec::ExecMode;
use visicrit_core::gateway::{Cache, Gateway};
use visicrit_core::model::{GeneratedText, TextVariant};
use visicrit_core::pipeline::{Pipeline, PipelineSettings};
use visicrit_core::prompt::TemplateSet;
use visicrit_core::synth::{self, SynthCorpus, SynthOptions};
use visicrit_core::{eval, trainset};

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn pipeline(corpus: &SynthCorpus, exec: ExecMode) -> Pipeline {
    let templates = Arc::new(TemplateSet::builtin());
    let world = Arc::new(corpus.world(templates.clone()));
    let gw = Gateway::new(Cache::in_memory()).route_all(world, 0);
    Pipeline::new(
        gw,
        templates,
        PipelineSettings {
            exec,
            ..PipelineSettings::default()
        },
    )
}

fn trainset_build(c: &mut Criterion) {
    let corpus = synth::generate(SynthOptions {
        records: 40,
        ..SynthOptions::default()
    });
    let mut g = c.benchmark_group("trainset_build");
    g.sample_size(10);
    for mode in MODES {
        // Fresh cache per iteration so every call reaches the mock backend.
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter_batched(
                || pipeline(&corpus, mode),
                |p| trainset::build(&p, &corpus.records, 0.87, 1).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

fn overlap_scores(c: &mut Criterion) {
    let corpus = synth::generate(SynthOptions {
        records: 400,
        ..SynthOptions::default()
    });
    let refs: Vec<String> = corpus
        .records
        .iter()
        .map(|r| r.ground_truth_text.clone().unwrap())
        .collect();
    let texts: Vec<GeneratedText> = corpus
        .records
        .iter()
        .zip(refs.iter().cycle().skip(1))
        .map(|(r, t)| GeneratedText {
            record_id: r.record_id.clone(),
            variant: TextVariant::Draft,
            text: t.clone(),
            provenance: vec![],
        })
        .collect();
    let mut g = c.benchmark_group("score_corpus");
    for mode in MODES {
        let templates = Arc::new(TemplateSet::builtin());
        let p = Pipeline::new(
            Gateway::new(Cache::in_memory()),
            templates,
            PipelineSettings {
                exec: mode,
                ..PipelineSettings::default()
            },
        );
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| eval::score_corpus(&p, &corpus.records, &texts, &refs).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, trainset_build, overlap_scores);
criterion_main!(benches);
