#![allow(dead_code)]

use std::path::{Path, PathBuf};

use visicrit_cli::config::{Paths, PipelineConfig};
use visicrit_core::model::write_records;
use visicrit_core::synth::{self, SynthCorpus, SynthOptions};

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub corpus: SynthCorpus,
}

impl Workspace {
    pub fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["visicrit"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--config", self.config.to_str().unwrap()]);
        visicrit_cli::run(argv, false)
    }
}

/// A synthetic corpus plus an all-mock config in a fresh directory.
pub fn workspace(records: usize, seed: u64, edit: impl FnOnce(&mut PipelineConfig)) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth::generate(SynthOptions {
        records,
        seed,
        ..SynthOptions::default()
    });
    write_corpus(&dir.path().join("corpus.jsonl"), &corpus);
    let mut cfg = PipelineConfig::all_mock(Paths {
        corpus: "corpus.jsonl".into(),
        templates_dir: None,
        cache_dir: "cache".into(),
        output_dir: "out".into(),
    });
    cfg.mock = corpus.settings.clone();
    cfg.mock.extra_vocabulary = corpus.vocabulary.clone();
    cfg.corpus_id = "synthetic".into();
    edit(&mut cfg);
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    Workspace { dir, config, corpus }
}

pub fn write_corpus(path: &Path, corpus: &SynthCorpus) {
    let f = std::fs::File::create(path).unwrap();
    write_records(std::io::BufWriter::new(f), &corpus.records).unwrap();
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn tree(root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
