//! Run configuration, loaded from TOML or JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::agent::{Role, DEFAULT_MAX_INPUT_TOKENS, DEFAULT_TEMPERATURE};
use crate::clozer::{self, DEFAULT_CLOZE_SHOTS};
use crate::error::{Error, Result};
use crate::fuser::{Granularity, SummaryPromptSpec, DEFAULT_SUMMARY_SHOTS};
use crate::kg::{KgMode, KgStore, DEFAULT_ENDPOINT, DEFAULT_SEARCH_LIMIT};
use crate::orchestrator::{Pipeline, PipelineConfig, UpdatePolicy};
use crate::registry;
use crate::similarity::{BleuDirection, EmbedConfig, Smoothing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeloConfig {
    /// Backend registry name: "scripted" or "openai".
    pub backend: String,
    pub script_path: Option<PathBuf>,
    pub text_model: String,
    pub vision_model: String,
    /// Per-role overrides of `text_model` / `vision_model`.
    pub models: BTreeMap<Role, String>,
    pub temperature: f64,
    pub max_input_tokens: usize,
    pub concurrency: usize,
    pub seed: Option<u64>,

    pub examples_path: Option<PathBuf>,
    pub summary_shots: usize,
    pub granularity: Granularity,
    pub shots_path: Option<PathBuf>,
    pub cloze_shots: usize,

    pub kg_endpoint: String,
    pub kg_cache_dir: PathBuf,
    pub kg_mode: KgMode,
    pub kg_language: String,

    /// Scorer registry name: "bleu" or "embed".
    pub scorer: String,
    pub bleu_max_ngram: usize,
    pub bleu_smoothing: Smoothing,
    pub bleu_direction: BleuDirection,
    pub embed_service_url: String,
    pub embed_timeout_ms: u64,

    pub search_limit: usize,
    pub top_k: usize,
    pub max_iterations: u32,
    pub workers: usize,

    pub update_policy: UpdatePolicy,

    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for MeloConfig {
    fn default() -> Self {
        let adapter = AdapterConfig::default();
        let embed = EmbedConfig::default();
        MeloConfig {
            backend: "scripted".into(),
            script_path: None,
            text_model: "scripted-text".into(),
            vision_model: "scripted-vision".into(),
            models: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
            concurrency: 4,
            seed: None,
            examples_path: None,
            summary_shots: DEFAULT_SUMMARY_SHOTS,
            granularity: Granularity::default(),
            shots_path: None,
            cloze_shots: DEFAULT_CLOZE_SHOTS,
            kg_endpoint: DEFAULT_ENDPOINT.into(),
            kg_cache_dir: PathBuf::from("kg_cache"),
            kg_mode: KgMode::default(),
            kg_language: adapter.language,
            scorer: "bleu".into(),
            bleu_max_ngram: 4,
            bleu_smoothing: Smoothing::default(),
            bleu_direction: BleuDirection::default(),
            embed_service_url: embed.service_url,
            embed_timeout_ms: embed.timeout_ms,
            search_limit: DEFAULT_SEARCH_LIMIT,
            top_k: adapter.top_k,
            max_iterations: adapter.max_iterations,
            workers: 4,
            update_policy: UpdatePolicy::default(),
            base_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl MeloConfig {
    /// Loads by extension (`.toml` / `.json`), trying both otherwise.
    /// Relative paths inside resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Some(ConfigFormat::Toml),
            Some("json") => Some(ConfigFormat::Json),
            _ => None,
        };
        let mut cfg = match format {
            Some(f) => Self::parse(&text, f)?,
            None => Self::parse(&text, ConfigFormat::Toml).or_else(|_| Self::parse(&text, ConfigFormat::Json))?,
        };
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        match format {
            ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string())),
            ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string())),
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.script_path, &mut self.examples_path, &mut self.shots_path].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.kg_cache_dir);
        self.base_dir = Some(base.to_path_buf());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if !(1..=4).contains(&self.bleu_max_ngram) {
            return bad(format!("bleu_max_ngram {} outside [1, 4]", self.bleu_max_ngram));
        }
        if self.summary_shots == 0 {
            return bad("summary_shots must be at least 1".into());
        }
        self.adapter().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.update_policy.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            search_limit: self.search_limit,
            top_k: self.top_k,
            max_iterations: self.max_iterations,
            language: self.kg_language.clone(),
        }
    }

    pub fn embed(&self) -> EmbedConfig {
        EmbedConfig { service_url: self.embed_service_url.clone(), timeout_ms: self.embed_timeout_ms, ..EmbedConfig::default() }
    }

    pub fn model_assignments(&self) -> BTreeMap<Role, String> {
        Role::ALL
            .iter()
            .map(|&r| {
                let default = if r == Role::VisionQa { &self.vision_model } else { &self.text_model };
                (r, self.models.get(&r).unwrap_or(default).clone())
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form, hex. Paths under the config's
    /// own directory are hashed relative to it, so moving a checkout does
    /// not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        if let Some(base) = &self.base_dir {
            let rel = |p: &mut PathBuf| {
                if let Ok(r) = p.strip_prefix(base) {
                    *p = r.to_path_buf();
                }
            };
            for p in [&mut c.script_path, &mut c.examples_path, &mut c.shots_path].into_iter().flatten() {
                rel(p);
            }
            rel(&mut c.kg_cache_dir);
        }
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let summary = match &self.examples_path {
            Some(p) => SummaryPromptSpec::from_examples_file(p)?,
            None => SummaryPromptSpec::builtin(),
        }
        .with_shots(self.summary_shots);
        let mut cloze_shots = match &self.shots_path {
            Some(p) => clozer::load_shots(p)?,
            None => clozer::builtin_shots(),
        };
        cloze_shots.truncate(self.cloze_shots);
        Ok(PipelineConfig {
            adapter: self.adapter(),
            summary,
            granularity: self.granularity,
            cloze_shots,
            models: self.model_assignments(),
            temperature: self.temperature,
            max_input_tokens: self.max_input_tokens,
            seed: self.seed,
            update_policy: self.update_policy.clone(),
        })
    }

    pub fn kg_store(&self, mode: Option<KgMode>) -> Result<KgStore> {
        KgStore::new(self.kg_endpoint.clone(), self.kg_cache_dir.clone(), mode.unwrap_or(self.kg_mode))
    }

    /// Wires a pipeline from the default registries. `kg_mode` overrides the
    /// configured mode.
    pub fn build_pipeline(&self, kg_mode: Option<KgMode>) -> Result<Pipeline> {
        let scorer = registry::default_scorers().build(&self.scorer, self)?;
        let backend = registry::default_backends().build(&self.backend, self)?;
        let store = Arc::new(self.kg_store(kg_mode)?);
        Pipeline::new(self.pipeline_config()?, store, scorer, backend.clone(), backend)
    }
}
