//! Batch pipeline for synthesizing faithful long-context reasoning
//! instruction datasets from multi-hop QA corpora.
//!
//! The pipeline samples a hop-balanced training pool, renders four prompt
//! regimes (citation-style reasoning with and without ground-truth guidance
//! and documents), drives a chat-completions endpoint (or a deterministic
//! offline mock) to synthesize reasoning chains, and refactors those chains
//! into supervised fine-tuning and preference datasets. Rule-based metrics
//! (EM, SubEM, token F1, attribution F1) score model responses, and a small
//! numeric module implements the post-training losses with gradient checks.

pub mod chain;
pub mod client;
pub mod config;
pub mod corpus;
pub mod dataset;
mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod po_math;
pub mod prompt;

pub use chain::{
    assess_chain, extract_citations, extract_final_answer, ChainQuality, ReasoningChain,
};
pub use client::{ClientConfig, CompletionResult, LlmClient, MockBackend};
pub use config::{PipelineConfig, Purpose};
pub use corpus::{
    load_samples, sample_balanced, split_paragraphs, Document, HopQuota, Sample, SchemaTag,
};
pub use dataset::{build_po, build_sft, PoRecord, RejectedTag, SftRecord};
pub use metrics::{
    attribution_f1, em, fit_linear, normalize, subem, token_f1, MetricReport, RegressionFit,
};
pub use pipeline::{ChainRecord, Pipeline, PipelineError, ResponseRecord};
pub use po_math::{
    grad_check, or_loss, orpo_loss, seq_odds, sft_loss, LossKind, OddsKind, OrpoConfig,
    SequenceLikelihood,
};
pub use prompt::{
    render_inference_prompt, render_synthesis_prompt, InferenceStyle, PromptVariant,
    RenderedPrompt, TemplateSet,
};
