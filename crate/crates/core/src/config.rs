//! Pipeline configuration: one JSON file, environment overrides, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::WeightTable;
use crate::backends::{BackendConfig, GenerationParams};
use crate::decision::DEFAULT_CONFIDENCE_THRESHOLD;
use crate::error::{Error, Result};
use crate::knowledge::{Bm25Params, RetrievalGating};

/// Timestamp written into traces when mock backends are active.
pub const MOCK_CLOCK: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub definitions: String,
    pub encounters: String,
    /// Gold annotations; absent for unlabelled splits.
    pub annotations: Option<String>,
    pub images_dir: Option<String>,
    pub knowledge_base: String,
    /// Prediction CSVs from other models, used as advisory input.
    pub advisory: Vec<String>,
    pub mock_fixtures: Option<String>,
    pub templates_dir: Option<String>,
    pub output_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            definitions: "definitions.json".into(),
            encounters: "{split}.json".into(),
            annotations: Some("{split}_cvqa.json".into()),
            images_dir: Some("images_{split}".into()),
            knowledge_base: "knowledge.jsonl".into(),
            advisory: Vec::new(),
            mock_fixtures: None,
            templates_dir: None,
            output_dir: "output".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub chat: BackendConfig,
    pub embedding: BackendConfig,
    pub reranker: BackendConfig,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            chat: BackendConfig::named("chat"),
            embedding: BackendConfig::named("embedding"),
            reranker: BackendConfig::named("reranker"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub split: String,
    pub seed: u64,
    pub workers: usize,
    pub mock_backends: bool,
    pub threshold: f64,
    pub gating: RetrievalGating,
    pub weights: WeightTable,
    pub k_each: usize,
    pub top_k: usize,
    pub max_queries: usize,
    pub bm25: Bm25Params,
    pub batch_size: usize,
    pub scoring_policy: String,
    pub generation: GenerationParams,
    pub backends: BackendsConfig,
    pub paths: PathsConfig,
    /// Directory relative paths are resolved against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split: "valid".into(),
            seed: 42,
            workers: 4,
            mock_backends: false,
            threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            gating: RetrievalGating::default(),
            weights: WeightTable::default(),
            k_each: 5,
            top_k: 3,
            max_queries: 3,
            bm25: Bm25Params::default(),
            batch_size: crate::dataset::DEFAULT_BATCH_SIZE,
            scoring_policy: "multiset-overlap".into(),
            generation: GenerationParams::default(),
            backends: BackendsConfig::default(),
            paths: PathsConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Command-line values that take precedence over file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub split: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub mock_backends: bool,
    pub output_dir: Option<String>,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

fn parse_env<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    env_var(name)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{name}={v:?} is not a valid value")))
        })
        .transpose()
}

impl PipelineConfig {
    /// Reads the file (or defaults when `path` is None), then applies
    /// `DERMQA_*` environment variables, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut config: PipelineConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::format(path.display().to_string(), "<root>", e.to_string()))?;
                config.base_dir = path
                    .parent()
                    .map(Path::to_path_buf)
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or_else(|| PathBuf::from("."));
                config
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = parse_env("DERMQA_SEED")? {
            config.seed = seed;
        }
        if let Some(workers) = parse_env("DERMQA_WORKERS")? {
            config.workers = workers;
        }
        if let Some(split) = env_var("DERMQA_SPLIT") {
            config.split = split;
        }
        if let Some(dir) = env_var("DERMQA_OUTPUT_DIR") {
            config.paths.output_dir = dir;
        }
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(split) = &overrides.split {
            self.split = split.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(workers) = overrides.workers {
            self.workers = workers;
        }
        if overrides.mock_backends {
            self.mock_backends = true;
        }
        if let Some(dir) = &overrides.output_dir {
            self.paths.output_dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.split.trim().is_empty() {
            return Err(Error::Config("split must not be empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.k_each == 0 || self.top_k == 0 || self.max_queries == 0 {
            return Err(Error::Config("k_each, top_k and max_queries must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.bm25.k1.is_nan() || self.bm25.k1 < 0.0 || !(0.0..=1.0).contains(&self.bm25.b) {
            return Err(Error::Config(format!("invalid BM25 parameters {:?}", self.bm25)));
        }
        crate::evaluation::policy_by_name(&self.scoring_policy)?;
        self.weights.validate()?;
        self.generation.validate()?;
        self.backends.chat.validate()?;
        self.backends.embedding.validate()?;
        self.backends.reranker.validate()?;
        if self.mock_backends && self.paths.mock_fixtures.is_none() {
            return Err(Error::Config("mock backends need paths.mock_fixtures".into()));
        }
        Ok(())
    }

    /// Substitutes `{split}` and resolves against the config directory.
    pub fn resolve(&self, template: &str) -> PathBuf {
        let path = PathBuf::from(template.replace("{split}", &self.split));
        if path.is_absolute() {
            path
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir).join(&self.split)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_root().join(stage)
    }

    /// Stable hash of the effective configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::text::sha256_hex(json.as_bytes())
    }
}
