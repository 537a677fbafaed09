//! Pipeline configuration: one TOML file drives every subcommand.
//!
//! `LONGFAITH_BASE_URL` overrides the configured endpoint at load time, and
//! the bearer token is always read from the environment variable named by
//! `client.api_key_env` (default `LONGFAITH_API_KEY`).

use crate::client::ClientConfig;
use crate::corpus::{CorpusError, HopQuota, SchemaTag};
use crate::dataset::RejectedTag;
use crate::prompt::{InferenceStyle, PromptVariant, TemplateSet};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const BASE_URL_ENV: &str = "LONGFAITH_BASE_URL";
pub const API_KEY_ENV: &str = "LONGFAITH_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid quota key {0:?}: hop counts are integers")]
    BadQuotaKey(String),
    #[error(transparent)]
    Quota(#[from] CorpusError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_schema")]
    pub schema: SchemaTag,
}

fn default_schema() -> SchemaTag {
    SchemaTag::Canonical
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub seed: u64,
    /// Map from hop count to required sample count, e.g. `{ "2" = 512 }`.
    pub quotas: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesSection {
    /// Directory of template overrides; bundled defaults when unset.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    pub base_url: String,
    pub api_key_env: String,
    pub model: String,
    pub synthesis_temperature: f64,
    pub inference_temperature: f64,
    pub max_output_tokens: u32,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub backoff_base_ms: u64,
    /// Run against the deterministic offline mock instead of the endpoint.
    pub mock: bool,
    /// Final answer the mock emits for the no-ground-truth regime.
    pub mock_wrong_answer: String,
}

impl Default for ClientSection {
    fn default() -> Self {
        let base = ClientConfig::default();
        Self {
            base_url: base.base_url,
            api_key_env: base.api_key_source,
            model: base.model_name,
            synthesis_temperature: 0.7,
            inference_temperature: 0.0,
            max_output_tokens: base.max_output_tokens,
            max_in_flight: base.max_in_flight,
            retry_limit: base.retry_limit,
            backoff_base_ms: base.backoff_base_ms,
            mock: false,
            mock_wrong_answer: "1903".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildSection {
    /// Drop samples whose chosen chain never states the gold answer.
    pub strict_gold: bool,
    /// Paragraph count for splitting single-document items at inference.
    pub paragraph_count: usize,
    /// Rejected-tag subset used by the preference build.
    pub rejected_tags: Vec<RejectedTag>,
}

impl Default for BuildSection {
    fn default() -> Self {
        Self {
            strict_gold: false,
            paragraph_count: 20,
            rejected_tags: RejectedTag::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub report_path: Option<PathBuf>,
    pub points_path: Option<PathBuf>,
}

/// Everything the subcommands need, parsed from one TOML file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub templates: TemplatesSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub build: BuildSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

/// Which temperature a command runs the client at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Synthesis,
    Inference,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.is_empty() {
                config.client.base_url = url;
            }
        }
        Ok(config)
    }

    pub fn hop_quota(&self) -> Result<HopQuota, ConfigError> {
        let mut counts = BTreeMap::new();
        for (key, &count) in &self.sampling.quotas {
            let hop: u32 = key
                .parse()
                .map_err(|_| ConfigError::BadQuotaKey(key.clone()))?;
            counts.insert(hop, count);
        }
        Ok(HopQuota::new(counts)?)
    }

    pub fn template_set(&self) -> Result<TemplateSet, crate::prompt::PromptError> {
        match &self.templates.dir {
            Some(dir) => TemplateSet::from_dir(dir),
            None => Ok(TemplateSet::bundled()),
        }
    }

    pub fn client_config(&self, purpose: Purpose) -> ClientConfig {
        let temperature = match purpose {
            Purpose::Synthesis => self.client.synthesis_temperature,
            Purpose::Inference => self.client.inference_temperature,
        };
        ClientConfig {
            base_url: self.client.base_url.clone(),
            api_key_source: self.client.api_key_env.clone(),
            model_name: self.client.model.clone(),
            temperature,
            max_output_tokens: self.client.max_output_tokens,
            max_in_flight: self.client.max_in_flight,
            retry_limit: self.client.retry_limit,
            backoff_base_ms: self.client.backoff_base_ms,
        }
    }

    pub fn sampled_corpus_path(&self) -> PathBuf {
        self.output.dir.join("sampled.jsonl")
    }

    pub fn chains_path(&self, variant: PromptVariant) -> PathBuf {
        self.output
            .dir
            .join(format!("chains_{}.jsonl", variant.tag()))
    }

    pub fn sft_path(&self, ablation: Option<RejectedTag>) -> PathBuf {
        let name = match ablation {
            None => "sft.jsonl".to_string(),
            Some(tag) => format!("sft_{}.jsonl", tag.tag()),
        };
        self.output.dir.join(name)
    }

    pub fn po_path(&self, tags: &[RejectedTag]) -> PathBuf {
        let name = if tags.len() == RejectedTag::ALL.len() {
            "po.jsonl".to_string()
        } else {
            let joined: Vec<&str> = tags.iter().map(|t| t.tag()).collect();
            format!("po_{}.jsonl", joined.join("_"))
        };
        self.output.dir.join(name)
    }

    pub fn responses_path(&self, style: InferenceStyle) -> PathBuf {
        self.output
            .dir
            .join(format!("responses_{}.jsonl", style.tag()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.evaluate
            .report_path
            .clone()
            .unwrap_or_else(|| self.output.dir.join("report.json"))
    }

    pub fn points_path(&self) -> PathBuf {
        self.evaluate
            .points_path
            .clone()
            .unwrap_or_else(|| self.output.dir.join("points.csv"))
    }
}
