//! Batch driver for an OpenAI-compatible chat-completions endpoint, plus a
//! deterministic offline mock.
//!
//! `complete_batch` owns all parallelism: a fixed pool of worker threads
//! (at most `max_in_flight`) pulls prompts from a shared cursor and writes
//! each result into its submission slot, so callers always see results in
//! submission order. Retriable failures (HTTP 429/5xx, timeouts) back off
//! exponentially up to `retry_limit`; per-item failures after retries are
//! recorded as failed entries rather than aborting the batch.

use crate::corpus::Sample;
use crate::prompt::{InferenceStyle, PromptKind, PromptVariant, RenderedPrompt};
use regex::Regex;
use serde::Deserialize;
use serde_json::json;
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("prompt batch is empty")]
    EmptyBatch,
    #[error("non-retriable endpoint error: {0}")]
    Fatal(String),
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("all {count} batch items failed; first failure: {first}")]
    AllFailed { count: usize, first: String },
}

/// How a single backend call failed.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Worth retrying: rate limits, server errors, timeouts.
    #[error("{0}")]
    Retriable(String),
    /// Not worth retrying: auth failures, bad requests, unknown prompts.
    #[error("{0}")]
    Fatal(String),
}

/// Connection and batching parameters for the completion endpoint.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_source: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub backoff_base_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            api_key_source: "LONGFAITH_API_KEY".into(),
            model_name: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            max_in_flight: 8,
            retry_limit: 3,
            backoff_base_ms: 250,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_in_flight < 1 {
            return Err(ClientError::InvalidConfig(
                "max_in_flight must be >= 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ClientError::InvalidConfig(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(ClientError::InvalidConfig(
                "max_output_tokens must be > 0".into(),
            ));
        }
        if self.backoff_base_ms == 0 {
            return Err(ClientError::InvalidConfig(
                "backoff_base_ms must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One successful completion, tied back to its submission slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub request_index: usize,
    pub text: String,
    pub finish_reason: String,
    pub attempt_count: u32,
}

/// One failed batch item, recorded after the retry budget ran out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemFailure {
    pub request_index: usize,
    pub attempt_count: u32,
    pub message: String,
}

pub type ItemOutcome = Result<CompletionResult, ItemFailure>;

/// Raw text plus finish reason from one backend call.
#[derive(Debug, Clone)]
pub struct BackendResponse {
    pub text: String,
    pub finish_reason: String,
}

/// A completion source: the HTTP endpoint or an offline mock.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &RenderedPrompt) -> Result<BackendResponse, BackendError>;
}

/// Blocking client for `{base_url}/chat/completions`.
pub struct HttpBackend {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

impl HttpBackend {
    pub fn new(config: &ClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ClientError::InvalidConfig(format!("http client: {e}")))?;
        let api_key = std::env::var(&config.api_key_source)
            .ok()
            .filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::debug!(
                "no api key in ${}; sending unauthenticated requests",
                config.api_key_source
            );
        }
        Ok(Self {
            http,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key,
            model: config.model_name.clone(),
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        })
    }
}

fn snippet(body: &str) -> String {
    let trimmed = body.trim();
    if trimmed.len() > 200 {
        format!("{}...", &trimmed[..200])
    } else {
        trimmed.to_string()
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &RenderedPrompt) -> Result<BackendResponse, BackendError> {
        let payload = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut request = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .json(&payload);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            // connection refused / timeout: transient by assumption
            BackendError::Retriable(format!("request failed: {e}"))
        })?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Retriable(format!(
                "HTTP {status}: {}",
                snippet(&body)
            )));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!(
                "HTTP {status}: {}",
                snippet(&body)
            )));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Fatal("response has no choices".into()))?;
        Ok(BackendResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".into()),
        })
    }
}

#[derive(Debug, Clone)]
struct MockEntry {
    supporting: Vec<usize>,
    answer: String,
}

/// Deterministic offline completion source, keyed on `(variant, sample_id)`.
///
/// Ground-truth prompts yield a chain citing every supporting index once in
/// ascending order and ending with the gold answer; the no-ground-truth
/// regime ends with a configurable wrong answer; plain-step prompts carry the
/// same content with the citation markers stripped; the no-document regime
/// cites nothing.
pub struct MockBackend {
    entries: HashMap<String, MockEntry>,
    wrong_answer: String,
}

fn citation_marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" ?\[[0-9][0-9, ]*\]").expect("static regex"))
}

impl MockBackend {
    pub fn new(samples: &[Sample]) -> Self {
        Self::with_wrong_answer(samples, "1903")
    }

    pub fn with_wrong_answer(samples: &[Sample], wrong_answer: &str) -> Self {
        let entries = samples
            .iter()
            .map(|s| {
                (
                    s.id.clone(),
                    MockEntry {
                        supporting: s.supporting_indices.iter().copied().collect(),
                        answer: s.answer.clone(),
                    },
                )
            })
            .collect();
        Self {
            entries,
            wrong_answer: wrong_answer.to_string(),
        }
    }

    fn grounded_chain(&self, id: &str, entry: &MockEntry) -> String {
        let mut lines: Vec<String> = entry
            .supporting
            .iter()
            .enumerate()
            .map(|(i, k)| {
                format!(
                    "Step {}: Document [{k}] states fact {} relevant to {id}.",
                    i + 1,
                    i + 1
                )
            })
            .collect();
        lines.push(format!(
            "Combining the steps gives the conclusion. The answer is {}.",
            entry.answer
        ));
        lines.join("\n")
    }

    fn misinformed_chain(&self, id: &str, entry: &MockEntry) -> String {
        let mut lines: Vec<String> = entry
            .supporting
            .iter()
            .enumerate()
            .map(|(i, k)| {
                format!(
                    "Step {}: Document [{k}] seems to suggest fact {} about {id}.",
                    i + 1,
                    i + 1
                )
            })
            .collect();
        lines.push(format!(
            "Reading without the gold answer, the trail goes cold. The answer is {}.",
            self.wrong_answer
        ));
        lines.join("\n")
    }

    fn parametric_chain(&self, id: &str, entry: &MockEntry) -> String {
        format!(
            "Recalling internal knowledge about {id} without consulting any documents: \
the relevant facts are remembered rather than read. The answer is {}.",
            entry.answer
        )
    }

    fn strip_citations(text: &str) -> String {
        citation_marker_regex().replace_all(text, "").into_owned()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &RenderedPrompt) -> Result<BackendResponse, BackendError> {
        let entry = self.entries.get(&prompt.sample_id).ok_or_else(|| {
            BackendError::Fatal(format!(
                "unrecognized prompt: unknown sample id {:?}",
                prompt.sample_id
            ))
        })?;
        let id = prompt.sample_id.as_str();
        let text = match prompt.kind {
            PromptKind::Synthesis(PromptVariant::CocGtDoc) => self.grounded_chain(id, entry),
            PromptKind::Synthesis(PromptVariant::CotGtDoc) => {
                Self::strip_citations(&self.grounded_chain(id, entry))
            }
            PromptKind::Synthesis(PromptVariant::CocDoc) => self.misinformed_chain(id, entry),
            PromptKind::Synthesis(PromptVariant::CotGtNodoc) => self.parametric_chain(id, entry),
            PromptKind::Inference(InferenceStyle::Coc) => self.grounded_chain(id, entry),
            PromptKind::Inference(InferenceStyle::Cot) => {
                Self::strip_citations(&self.grounded_chain(id, entry))
            }
        };
        Ok(BackendResponse {
            text,
            finish_reason: "stop".into(),
        })
    }
}

const MAX_BACKOFF_MS: u64 = 30_000;

/// Exponential backoff before retry number `attempt + 1`, saturating at
/// 30 seconds.
fn backoff_ms(base_ms: u64, attempt: u32) -> u64 {
    let factor = 1u64.checked_shl(attempt - 1).unwrap_or(u64::MAX);
    base_ms.saturating_mul(factor).min(MAX_BACKOFF_MS)
}

/// Synchronous batch client over a pluggable backend.
pub struct LlmClient {
    config: ClientConfig,
    backend: Box<dyn CompletionBackend>,
}

impl LlmClient {
    pub fn new(
        config: ClientConfig,
        backend: Box<dyn CompletionBackend>,
    ) -> Result<Self, ClientError> {
        config.validate()?;
        Ok(Self { config, backend })
    }

    pub fn http(config: ClientConfig) -> Result<Self, ClientError> {
        let backend = HttpBackend::new(&config)?;
        Self::new(config, Box::new(backend))
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Complete one prompt, retrying retriable failures with exponential
    /// backoff up to `retry_limit` extra attempts.
    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<CompletionResult, ClientError> {
        self.complete_indexed(prompt, 0)
    }

    fn complete_indexed(
        &self,
        prompt: &RenderedPrompt,
        request_index: usize,
    ) -> Result<CompletionResult, ClientError> {
        let max_attempts = self.config.retry_limit + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(prompt) {
                Ok(response) => {
                    return Ok(CompletionResult {
                        request_index,
                        text: response.text,
                        finish_reason: response.finish_reason,
                        attempt_count: attempt,
                    });
                }
                Err(BackendError::Fatal(message)) => {
                    return Err(ClientError::Fatal(message));
                }
                Err(BackendError::Retriable(message)) => {
                    if attempt >= max_attempts {
                        return Err(ClientError::RetriesExhausted {
                            attempts: attempt,
                            last: message,
                        });
                    }
                    let backoff = backoff_ms(self.config.backoff_base_ms, attempt);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    }

    /// Complete a batch with bounded concurrency. Results come back in
    /// submission order; per-item failures are recorded inline. Errors only
    /// on an empty batch or when every item failed.
    pub fn complete_batch(
        &self,
        prompts: &[RenderedPrompt],
    ) -> Result<Vec<ItemOutcome>, ClientError> {
        if prompts.is_empty() {
            return Err(ClientError::EmptyBatch);
        }
        let workers = self.config.max_in_flight.min(prompts.len());
        let cursor = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<ItemOutcome>>> =
            (0..prompts.len()).map(|_| Mutex::new(None)).collect();

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = cursor.fetch_add(1, Ordering::Relaxed);
                    if index >= prompts.len() {
                        break;
                    }
                    let outcome =
                        self.complete_indexed(&prompts[index], index)
                            .map_err(|e| ItemFailure {
                                request_index: index,
                                attempt_count: match e {
                                    ClientError::RetriesExhausted { attempts, .. } => attempts,
                                    _ => 1,
                                },
                                message: e.to_string(),
                            });
                    *slots[index].lock().expect("slot lock poisoned") = Some(outcome);
                });
            }
        });

        let results: Vec<ItemOutcome> = slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("slot lock poisoned")
                    .expect("slot filled")
            })
            .collect();
        if results.iter().all(|r| r.is_err()) {
            let first = results[0]
                .as_ref()
                .err()
                .map(|f| f.message.clone())
                .unwrap_or_default();
            return Err(ClientError::AllFailed {
                count: results.len(),
                first,
            });
        }
        Ok(results)
    }
}
