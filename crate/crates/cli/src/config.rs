//! Declarative run configuration (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use visicrit_core::gateway::http::HttpBackendConfig;
use visicrit_core::gateway::mock::MockSettings;
use visicrit_core::gateway::ModelRole;
use visicrit_core::model::{SchemaMode, HALLUCINATED_RATIONALE};
use visicrit_core::pipeline::AlignmentMode;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config {path}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    /// Deterministic mock world built from the corpus manifests.
    Mock,
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tau_align: f64,
    pub tau_sal: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_align: 0.8,
            tau_sal: 0.8,
        }
    }
}

/// Settings handed through to the critic trainer untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    pub batch_size: u32,
    pub max_output_tokens: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub optimizer: String,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_output_tokens: 350,
            learning_rate: 5e-5,
            epochs: 25,
            optimizer: "adam".into(),
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_split_ratio() -> f64 {
    0.87
}

fn default_retries() -> u32 {
    1
}

fn default_clip_weight() -> f64 {
    1.0
}

fn default_corpus_id() -> String {
    "corpus".into()
}

fn default_rationale() -> String {
    HALLUCINATED_RATIONALE.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub backends: BTreeMap<ModelRole, BackendConfig>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub schema_mode: SchemaMode,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub alignment: AlignmentMode,
    #[serde(default = "default_clip_weight")]
    pub clip_weight: f64,
    #[serde(default = "default_corpus_id")]
    pub corpus_id: String,
    /// Row label of the generator in report tables; defaults to the
    /// generator's backend kind.
    #[serde(default)]
    pub backbone: Option<String>,
    #[serde(default = "default_rationale")]
    pub hallucinated_rationale: String,
    #[serde(default)]
    pub mock: MockSettings,
    #[serde(default)]
    pub trainer: TrainerSettings,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = self.thresholds;
        for (name, v) in [("tau_align", t.tau_align), ("tau_sal", t.tau_sal)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} = {v} is not in [0, 1]")));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split_ratio = {} is not in (0, 1)",
                self.split_ratio
            )));
        }
        if !(self.clip_weight.is_finite() && self.clip_weight > 0.0) {
            return Err(ConfigError::Invalid("clip_weight must be positive".into()));
        }
        if self.corpus_id.is_empty() || self.corpus_id.contains(['/', '\\']) {
            return Err(ConfigError::Invalid("corpus_id must be a plain file-name stem".into()));
        }
        Ok(())
    }

    /// Read, resolve relative paths against the config's directory, validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: PipelineConfig = serde_json::from_slice(&raw).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.corpus);
        resolve(&mut cfg.paths.cache_dir);
        resolve(&mut cfg.paths.output_dir);
        if let Some(t) = cfg.paths.templates_dir.as_mut() {
            resolve(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn backbone(&self) -> String {
        self.backbone
            .clone()
            .unwrap_or_else(|| match self.backends.get(&ModelRole::GeneratorLmm) {
                Some(BackendConfig::Mock) => "mock".into(),
                Some(BackendConfig::Http(h)) => h.model.clone().unwrap_or_else(|| "http".into()),
                None => "none".into(),
            })
    }

    /// Every role on the mock backend; handy for tests and demos.
    pub fn all_mock(paths: Paths) -> Self {
        Self {
            paths,
            backends: ModelRole::ALL.into_iter().map(|r| (r, BackendConfig::Mock)).collect(),
            thresholds: Thresholds::default(),
            seed: default_seed(),
            split_ratio: default_split_ratio(),
            retries: default_retries(),
            schema_mode: SchemaMode::default(),
            workers: 0,
            alignment: AlignmentMode::default(),
            clip_weight: default_clip_weight(),
            corpus_id: default_corpus_id(),
            backbone: None,
            hallucinated_rationale: default_rationale(),
            mock: MockSettings::default(),
            trainer: TrainerSettings::default(),
        }
    }
}
