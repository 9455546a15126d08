//! Run configuration file (TOML).
//!
//! Every key has a default, so an empty file is a valid configuration.
//! `--set section.key=value` overrides are applied to the parsed document
//! before it is typed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SplitFractions;
use crate::agents::{AgentConfig, OutputFormat, DEFAULT_JUDGE_PROMPT};
use crate::backends::{
    http, EmbeddingBackend, HttpChatBackend, HttpEmbeddingBackend, HttpEndpoint, MockEmbedder,
    MockModel, MockModelConfig, ModelBackend, Script, ScriptedBackend,
};
use crate::controller::{PidGains, PolicyConfig, DEFAULT_INTEGRAL_BOUND};
use crate::error::{Error, Result};
use crate::knowledge_base::Projection;
use crate::pipelines::{Ablation, Backends, OnError, RunConfig};
use crate::prompt_mapper::{DirectiveTag, MapperConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub integral_bound: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            integral_bound: DEFAULT_INTEGRAL_BOUND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub top_k: usize,
    pub projection: Projection,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            top_k: 3,
            projection: Projection::Truncate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub refine_iters: u32,
    pub train_retrieval: bool,
    pub seed: u64,
    pub threshold: f64,
    pub shuffle: bool,
    pub on_error: OnError,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            refine_iters: 1,
            train_retrieval: false,
            seed: 0,
            threshold: 0.5,
            shuffle: false,
            on_error: OnError::Skip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub model: String,
    pub max_tokens: u32,
    pub timeout_s: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Name of the environment variable holding the bearer token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_token_name: Option<String>,
    pub in_flight: usize,
    pub temperature: f64,
    /// Attach images as content parts.
    pub multimodal: bool,
    /// Script file for `kind = "scripted"`.
    pub script: PathBuf,
    pub mock: MockModelConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let http = HttpEndpoint::default();
        Self {
            kind: BackendKind::Mock,
            base_url: http.base_url,
            model: http.model,
            max_tokens: 128,
            timeout_s: http.timeout_s,
            retries: http.retries,
            backoff_ms: http.backoff_ms,
            env_token_name: None,
            in_flight: http.in_flight,
            temperature: http.temperature,
            multimodal: http.multimodal,
            script: PathBuf::new(),
            mock: MockModelConfig::default(),
        }
    }
}

impl BackendConfig {
    pub fn endpoint(&self) -> HttpEndpoint {
        HttpEndpoint {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            timeout_s: self.timeout_s,
            retries: self.retries,
            backoff_ms: self.backoff_ms,
            env_token_name: self.env_token_name.clone(),
            in_flight: self.in_flight,
            temperature: self.temperature,
            multimodal: self.multimodal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    /// Mock embedder seed.
    pub seed: u64,
    pub timeout_s: f64,
    pub retries: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_token_name: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        let http = HttpEndpoint::default();
        Self {
            kind: EmbeddingKind::Mock,
            base_url: http.base_url,
            model: http.model,
            dim: 64,
            seed: 0,
            timeout_s: http.timeout_s,
            retries: http.retries,
            env_token_name: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn endpoint(&self) -> HttpEndpoint {
        HttpEndpoint {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            timeout_s: self.timeout_s,
            retries: self.retries,
            env_token_name: self.env_token_name.clone(),
            ..HttpEndpoint::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub judge_prompt: String,
    pub format: OutputFormat,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            judge_prompt: DEFAULT_JUDGE_PROMPT.into(),
            format: OutputFormat::default(),
        }
    }
}

/// File locations. Relative paths are resolved against the config file's
/// directory. An empty `kb` means "no store" for inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub kb: PathBuf,
    pub trace: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "manifest.jsonl".into(),
            kb: "kb.jsonl".into(),
            trace: "trace.jsonl".into(),
            report: "report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gains: PidGains,
    pub controller: ControllerSection,
    pub policy: PolicyConfig,
    pub mapper: MapperConfig,
    pub retrieval: RetrievalSection,
    pub run: RunSection,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub agent: AgentSection,
    pub split: SplitFractions,
    pub paths: Paths,
    pub ablation: Ablation,
}

fn config_error(message: impl std::fmt::Display) -> Error {
    Error::Config(message.to_string())
}

/// Parses `key=value` and stores it at the dotted `key` in `doc`. The
/// value is read as a TOML literal, falling back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("invalid override key `{key}`")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for section in sections {
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("`{section}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_error)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = toml::Value::Table(doc).try_into().map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file, applies overrides and resolves relative paths.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.paths.manifest);
        resolve(&mut self.paths.kb);
        resolve(&mut self.paths.trace);
        resolve(&mut self.paths.report);
        resolve(&mut self.backend.script);
    }

    pub fn default_toml() -> String {
        toml::to_string_pretty(&Config::default()).expect("default config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        self.split.validate()?;
        self.backend.mock.validate()?;
        if self.embedding.dim < 3 {
            return Err(Error::DimensionTooSmall(self.embedding.dim));
        }
        if self.backend.kind == BackendKind::Http {
            self.backend.endpoint().validate()?;
        }
        if self.embedding.kind == EmbeddingKind::Http {
            self.embedding.endpoint().validate()?;
        }
        if self.backend.kind == BackendKind::Scripted && self.backend.script.as_os_str().is_empty()
        {
            return Err(config_error(
                "backend.kind = \"scripted\" needs backend.script",
            ));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            gains: self.gains,
            integral_bound: self.controller.integral_bound,
            top_k: self.retrieval.top_k,
            threshold: self.run.threshold,
            mapper: self.mapper.clone(),
            policy: self.policy,
            projection: self.retrieval.projection,
            refine_iters: self.run.refine_iters,
            train_retrieval: self.run.train_retrieval,
            seed: self.run.seed,
            shuffle: self.run.shuffle,
            on_error: self.run.on_error,
            agent: AgentConfig {
                max_tokens: self.backend.max_tokens,
                format: self.agent.format.clone(),
                judge_prompt: self.agent.judge_prompt.clone(),
            },
            ablation: self.ablation,
            workers: self.backend.in_flight.max(1),
        }
    }

    /// The mock model keyed to this config's `u_low` phrase.
    pub fn mock_model_config(&self) -> MockModelConfig {
        MockModelConfig {
            u_low_phrase: self.mapper.directives.get(DirectiveTag::ULow).to_string(),
            ..self.backend.mock.clone()
        }
    }

    pub fn build_backends(&self) -> Result<Backends> {
        let model: Arc<dyn ModelBackend> = match self.backend.kind {
            BackendKind::Mock => Arc::new(MockModel::new(self.mock_model_config())),
            BackendKind::Http => Arc::new(HttpChatBackend::new(self.backend.endpoint())?),
            BackendKind::Scripted => {
                Arc::new(ScriptedBackend::new(Script::load(&self.backend.script)?))
            }
        };
        let embedder: Arc<dyn EmbeddingBackend> = match self.embedding.kind {
            EmbeddingKind::Mock => {
                Arc::new(MockEmbedder::new(self.embedding.dim, self.embedding.seed))
            }
            EmbeddingKind::Http => Arc::new(HttpEmbeddingBackend::new(
                self.embedding.endpoint(),
                self.embedding.dim,
            )?),
        };
        Ok(Backends { model, embedder })
    }

    /// Checks that configured HTTP endpoints answer. Returns one line per
    /// checked endpoint.
    pub fn probe_backends(&self) -> Result<Vec<String>> {
        let mut report = Vec::new();
        if self.backend.kind == BackendKind::Http {
            let status = http::probe(&self.backend.endpoint())?;
            report.push(format!(
                "backend {} reachable (HTTP {status})",
                self.backend.base_url
            ));
        }
        if self.embedding.kind == EmbeddingKind::Http {
            let status = http::probe(&self.embedding.endpoint())?;
            report.push(format!(
                "embedding {} reachable (HTTP {status})",
                self.embedding.base_url
            ));
        }
        if self.backend.kind == BackendKind::Scripted {
            let script = Script::load(&self.backend.script)?;
            report.push(format!(
                "script {} has {} entries",
                self.backend.script.display(),
                script.entries.len()
            ));
        }
        Ok(report)
    }
}
