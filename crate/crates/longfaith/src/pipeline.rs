//! End-to-end orchestration behind the CLI subcommands.
//!
//! The pipeline runs in two stages: `synthesize` turns sampled corpus items
//! into per-regime chain files (resumable, one request per missing sample),
//! and the build commands refactor those chain files into SFT/preference
//! datasets without any further model calls. Evaluation scores a responses
//! file against a test corpus with the rule-based metrics.

use crate::chain::{assess_chain, ChainQuality, ReasoningChain};
use crate::client::{ClientError, LlmClient, MockBackend};
use crate::config::{ConfigError, PipelineConfig, Purpose};
use crate::corpus::{
    load_samples, sample_balanced, split_paragraphs, write_samples, CorpusError, Document, Sample,
    SchemaTag,
};
use crate::dataset::{
    build_po, build_sft, po_length_stats, read_records, sft_length_stats, write_records, DataError,
    LengthStats, PoRecord, RejectedTag, SftRecord,
};
use crate::metrics::{
    attribution_f1, em, fit_linear, subem, token_f1, ItemScores, MetricError, MetricReport,
    RegressionFit,
};
use crate::po_math::{
    grad_check, or_loss_with, orpo_loss_with, seq_odds_with, sft_loss, LossKind, OddsKind,
    OrpoConfig, PoMathError, SequenceLikelihood,
};
use crate::prompt::{
    render_inference_prompt, render_synthesis_prompt, InferenceStyle, PromptError, PromptVariant,
    RenderedPrompt, TemplateSet,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Loss(#[from] PoMathError),
    #[error("sample {sample_id}: no chain found in {path}")]
    MissingChain { sample_id: String, path: String },
    #[error("response id {id} does not exist in the test corpus")]
    UnknownResponseId { id: String },
    #[error("duplicate response for id {id}")]
    DuplicateResponseId { id: String },
    #[error("no response for corpus id {id}")]
    MissingResponse { id: String },
    #[error("{failed} of {total} completions failed; partial output kept at {path}")]
    PartialCompletion {
        failed: usize,
        total: usize,
        path: String,
    },
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Exit codes: 2 config, 3 data, 4 endpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Template(_) => 2,
            Self::Corpus(_)
            | Self::Data(_)
            | Self::Metric(_)
            | Self::MissingChain { .. }
            | Self::UnknownResponseId { .. }
            | Self::DuplicateResponseId { .. }
            | Self::MissingResponse { .. }
            | Self::Loss(_)
            | Self::Io { .. } => 3,
            Self::Client(_) | Self::PartialCompletion { .. } => 4,
        }
    }
}

/// One synthesized chain as stored in a per-variant chain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub sample_id: String,
    pub variant: PromptVariant,
    pub raw_text: String,
    pub citations: Vec<usize>,
    pub final_answer: Option<String>,
    pub quality: ChainQuality,
}

/// One model response as stored by `infer` and consumed by `evaluate`.
/// The `response` key is accepted as a lenient spelling on read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    #[serde(rename = "response_text", alias = "response")]
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub path: PathBuf,
    pub per_hop: Vec<(u32, usize)>,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct VariantSynthesis {
    pub variant: PromptVariant,
    pub requested: usize,
    pub skipped: usize,
    pub written: usize,
    pub failed: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub path: PathBuf,
    pub written: usize,
    pub skipped_gold: usize,
    pub stats: LengthStats,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub report: MetricReport,
    pub fit: Option<RegressionFit>,
    pub report_path: PathBuf,
    pub points_path: PathBuf,
}

pub struct Pipeline {
    config: PipelineConfig,
    templates: TemplateSet,
}

fn write_records_atomic<T: Serialize>(records: &[T], path: &Path) -> Result<usize, PipelineError> {
    let tmp = path.with_extension("tmp");
    let count = write_records(records, &tmp)?;
    fs::rename(&tmp, path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(count)
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let templates = config.template_set()?;
        Ok(Self { config, templates })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    fn ensure_output_dir(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.config.output.dir).map_err(|source| PipelineError::Io {
            path: self.config.output.dir.display().to_string(),
            source,
        })
    }

    /// Build the completion client for a command: the offline mock when
    /// requested, the HTTP endpoint otherwise.
    pub fn make_client(
        &self,
        purpose: Purpose,
        mock: bool,
        mock_samples: &[Sample],
    ) -> Result<LlmClient, PipelineError> {
        let client_config = self.config.client_config(purpose);
        let client = if mock || self.config.client.mock {
            LlmClient::new(
                client_config,
                Box::new(MockBackend::with_wrong_answer(
                    mock_samples,
                    &self.config.client.mock_wrong_answer,
                )),
            )?
        } else {
            LlmClient::http(client_config)?
        };
        Ok(client)
    }

    /// Load the hop-balanced working corpus written by `sample`, or an
    /// explicit override path (always canonical schema).
    pub fn load_working_corpus(&self, path: Option<&Path>) -> Result<Vec<Sample>, PipelineError> {
        let path = path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.sampled_corpus_path());
        Ok(load_samples(&path, SchemaTag::Canonical)?)
    }

    /// Apply the hop quotas to the full corpus and write the canonical
    /// sampled file.
    pub fn cmd_sample(&self, output: Option<&Path>) -> Result<SampleReport, PipelineError> {
        let quota = self.config.hop_quota()?;
        let pool = load_samples(&self.config.corpus.path, self.config.corpus.schema)?;
        let picked = sample_balanced(&pool, &quota, self.config.sampling.seed)?;
        self.ensure_output_dir()?;
        let path = output
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.sampled_corpus_path());
        write_samples(&picked, &path)?;
        let per_hop = quota
            .counts()
            .iter()
            .map(|(&hop, _)| {
                let count = picked.iter().filter(|s| s.hop_count == hop).count();
                (hop, count)
            })
            .collect();
        Ok(SampleReport {
            path,
            per_hop,
            total: picked.len(),
        })
    }

    /// Synthesize chains for every requested regime. Samples already present
    /// in a chain file are skipped; files are rewritten in corpus order so a
    /// resumed run ends up byte-identical to an uninterrupted one.
    pub fn cmd_synthesize(
        &self,
        variants: &[PromptVariant],
        client: &LlmClient,
        corpus_override: Option<&Path>,
    ) -> Result<Vec<VariantSynthesis>, PipelineError> {
        let corpus = self.load_working_corpus(corpus_override)?;
        self.ensure_output_dir()?;
        let mut reports = Vec::new();
        let mut total_failed = 0usize;
        let mut total_requested = 0usize;
        for &variant in variants {
            let report = self.synthesize_variant(variant, client, &corpus)?;
            total_failed += report.failed;
            total_requested += report.requested;
            reports.push(report);
        }
        if total_failed > 0 {
            return Err(PipelineError::PartialCompletion {
                failed: total_failed,
                total: total_requested,
                path: self.config.output.dir.display().to_string(),
            });
        }
        Ok(reports)
    }

    fn synthesize_variant(
        &self,
        variant: PromptVariant,
        client: &LlmClient,
        corpus: &[Sample],
    ) -> Result<VariantSynthesis, PipelineError> {
        let path = self.config.chains_path(variant);
        let mut by_id: BTreeMap<String, ChainRecord> = BTreeMap::new();
        if path.exists() {
            for record in read_records::<ChainRecord>(&path)? {
                by_id.entry(record.sample_id.clone()).or_insert(record);
            }
        }
        let known_ids: std::collections::HashSet<&str> =
            corpus.iter().map(|s| s.id.as_str()).collect();
        let stale = by_id.len()
            - by_id
                .keys()
                .filter(|id| known_ids.contains(id.as_str()))
                .count();
        if stale > 0 {
            log::warn!(
                "{}: dropping {stale} chain(s) whose ids are not in the working corpus",
                path.display()
            );
        }

        let missing: Vec<&Sample> = corpus
            .iter()
            .filter(|s| !by_id.contains_key(&s.id))
            .collect();
        let requested = missing.len();
        let skipped = corpus.len() - requested;
        let mut failed = 0usize;
        if !missing.is_empty() {
            let prompts: Vec<RenderedPrompt> = missing
                .iter()
                .map(|s| render_synthesis_prompt(&self.templates, variant, s))
                .collect::<Result<_, _>>()?;
            let outcomes = client.complete_batch(&prompts)?;
            for (sample, outcome) in missing.iter().zip(outcomes) {
                match outcome {
                    Ok(done) => {
                        let chain = ReasoningChain::parse(&done.text);
                        let quality = assess_chain(&chain, sample);
                        by_id.insert(
                            sample.id.clone(),
                            ChainRecord {
                                sample_id: sample.id.clone(),
                                variant,
                                raw_text: chain.raw,
                                citations: chain.citations_in_order,
                                final_answer: chain.final_answer,
                                quality,
                            },
                        );
                    }
                    Err(failure) => {
                        failed += 1;
                        log::warn!(
                            "{variant}: sample {} failed after {} attempts: {}",
                            sample.id,
                            failure.attempt_count,
                            failure.message
                        );
                    }
                }
            }
        }

        let ordered: Vec<&ChainRecord> = corpus.iter().filter_map(|s| by_id.get(&s.id)).collect();
        write_records_atomic(&ordered, &path)?;
        Ok(VariantSynthesis {
            variant,
            requested,
            skipped,
            written: ordered.len(),
            failed,
            path,
        })
    }

    fn load_chain_map(
        &self,
        variant: PromptVariant,
    ) -> Result<(BTreeMap<String, ChainRecord>, PathBuf), PipelineError> {
        let path = self.config.chains_path(variant);
        let records = read_records::<ChainRecord>(&path)?;
        let map = records
            .into_iter()
            .map(|r| (r.sample_id.clone(), r))
            .collect();
        Ok((map, path))
    }

    fn chain_for<'a>(
        map: &'a BTreeMap<String, ChainRecord>,
        path: &Path,
        sample: &Sample,
    ) -> Result<&'a ChainRecord, PipelineError> {
        map.get(&sample.id)
            .ok_or_else(|| PipelineError::MissingChain {
                sample_id: sample.id.clone(),
                path: path.display().to_string(),
            })
    }

    /// Refactor one chain file into an SFT dataset. `ablation` picks the
    /// regime whose chains become the outputs (`None` builds the grounded
    /// flagship set).
    pub fn cmd_build_sft(
        &self,
        ablation: Option<RejectedTag>,
        corpus_override: Option<&Path>,
        strict_gold: bool,
        output_override: Option<&Path>,
    ) -> Result<BuildReport, PipelineError> {
        let (style, variant) = match ablation {
            None => (InferenceStyle::Coc, PromptVariant::CocGtDoc),
            Some(RejectedTag::WoCoc) => (InferenceStyle::Cot, PromptVariant::CotGtDoc),
            Some(RejectedTag::WoGt) => (InferenceStyle::Coc, PromptVariant::CocDoc),
            Some(RejectedTag::WoDoc) => (InferenceStyle::Coc, PromptVariant::CotGtNodoc),
        };
        let corpus = self.load_working_corpus(corpus_override)?;
        let (chains, chains_path) = self.load_chain_map(variant)?;
        let strict = strict_gold || self.config.build.strict_gold;

        let mut records = Vec::new();
        let mut skipped_gold = 0usize;
        for sample in &corpus {
            let record = Self::chain_for(&chains, &chains_path, sample)?;
            let chain = ReasoningChain::parse(&record.raw_text);
            if strict && !assess_chain(&chain, sample).contains_gold {
                skipped_gold += 1;
                continue;
            }
            records.push(build_sft(&self.templates, sample, &chain, style, variant)?);
        }
        self.ensure_output_dir()?;
        let path = output_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.sft_path(ablation));
        write_records_atomic(&records, &path)?;
        let stats = sft_length_stats(&records)?;
        Ok(BuildReport {
            path,
            written: records.len(),
            skipped_gold,
            stats,
        })
    }

    /// Refactor the chain files into a preference dataset with the grounded
    /// chain as chosen and the tagged regimes as rejected.
    pub fn cmd_build_po(
        &self,
        tags: &[RejectedTag],
        corpus_override: Option<&Path>,
        strict_gold: bool,
        output_override: Option<&Path>,
    ) -> Result<BuildReport, PipelineError> {
        if tags.is_empty() {
            return Err(PipelineError::Config(ConfigError::Invalid(
                "preference build needs a non-empty rejected-tag subset".into(),
            )));
        }
        let corpus = self.load_working_corpus(corpus_override)?;
        let (chosen_map, chosen_path) = self.load_chain_map(PromptVariant::CocGtDoc)?;
        let mut rejected_maps = Vec::new();
        for &tag in tags {
            let (map, path) = self.load_chain_map(tag.source_variant())?;
            rejected_maps.push((tag, map, path));
        }
        let strict = strict_gold || self.config.build.strict_gold;

        let mut records = Vec::new();
        let mut skipped_gold = 0usize;
        for sample in &corpus {
            let chosen_record = Self::chain_for(&chosen_map, &chosen_path, sample)?;
            let chosen = ReasoningChain::parse(&chosen_record.raw_text);
            if strict && !assess_chain(&chosen, sample).contains_gold {
                skipped_gold += 1;
                continue;
            }
            let mut rejected = BTreeMap::new();
            for (tag, map, path) in &rejected_maps {
                let record = Self::chain_for(map, path, sample)?;
                rejected.insert(*tag, ReasoningChain::parse(&record.raw_text));
            }
            records.push(build_po(&self.templates, sample, &chosen, &rejected)?);
        }
        self.ensure_output_dir()?;
        let path = output_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.po_path(tags));
        write_records_atomic(&records, &path)?;
        let stats = po_length_stats(&records)?;
        Ok(BuildReport {
            path,
            written: records.len(),
            skipped_gold,
            stats,
        })
    }

    /// Render inference prompts over a test corpus (splitting single-document
    /// items into ordered paragraphs), run the batch, and write responses.
    pub fn cmd_infer(
        &self,
        style: InferenceStyle,
        test_corpus: &Path,
        schema: Option<SchemaTag>,
        client: &LlmClient,
        output_override: Option<&Path>,
    ) -> Result<(PathBuf, usize, Vec<Sample>), PipelineError> {
        let schema = schema.unwrap_or(self.config.corpus.schema);
        let corpus = load_samples(test_corpus, schema)?;
        let n = self.config.build.paragraph_count;
        let mut prompts = Vec::with_capacity(corpus.len());
        for sample in &corpus {
            let documents: Vec<Document> = if sample.documents.len() == 1 {
                let source = &sample.documents[0];
                split_paragraphs(&source.body, n)?
                    .into_iter()
                    .map(|body| Document {
                        title: source.title.clone(),
                        body,
                    })
                    .collect()
            } else {
                sample.documents.clone()
            };
            let mut prompt =
                render_inference_prompt(&self.templates, style, &sample.question, &documents)?;
            prompt.sample_id = sample.id.clone();
            prompts.push(prompt);
        }

        let outcomes = client.complete_batch(&prompts)?;
        let mut responses = Vec::new();
        let mut failed = 0usize;
        for (sample, outcome) in corpus.iter().zip(outcomes) {
            match outcome {
                Ok(done) => responses.push(ResponseRecord {
                    id: sample.id.clone(),
                    response: done.text,
                }),
                Err(failure) => {
                    failed += 1;
                    log::warn!("inference failed for {}: {}", sample.id, failure.message);
                }
            }
        }
        self.ensure_output_dir()?;
        let path = output_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.config.responses_path(style));
        write_records_atomic(&responses, &path)?;
        if failed > 0 {
            return Err(PipelineError::PartialCompletion {
                failed,
                total: corpus.len(),
                path: path.display().to_string(),
            });
        }
        Ok((path, responses.len(), corpus))
    }

    /// Score a responses file against a test corpus and write the per-item
    /// report plus the `(attr_f1, em)` points file for regression plotting.
    pub fn cmd_evaluate(
        &self,
        responses_path: &Path,
        test_corpus: &Path,
        schema: Option<SchemaTag>,
    ) -> Result<EvaluationReport, PipelineError> {
        let schema = schema.unwrap_or(self.config.corpus.schema);
        let corpus = load_samples(test_corpus, schema)?;
        let responses: Vec<ResponseRecord> = read_records(responses_path)?;

        let ids: std::collections::HashSet<&str> = corpus.iter().map(|s| s.id.as_str()).collect();
        let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
        for record in &responses {
            if !ids.contains(record.id.as_str()) {
                return Err(PipelineError::UnknownResponseId {
                    id: record.id.clone(),
                });
            }
            if by_id
                .insert(record.id.as_str(), record.response.as_str())
                .is_some()
            {
                return Err(PipelineError::DuplicateResponseId {
                    id: record.id.clone(),
                });
            }
        }

        let mut per_item = Vec::with_capacity(corpus.len());
        for sample in &corpus {
            let response =
                *by_id
                    .get(sample.id.as_str())
                    .ok_or_else(|| PipelineError::MissingResponse {
                        id: sample.id.clone(),
                    })?;
            let golds = sample.gold_answers();
            let trimmed = crate::chain::extract_final_answer(response);
            let chain = ReasoningChain::parse(response);
            let (attr_precision, attr_recall, attr_f1) =
                attribution_f1(&chain.citation_set, &sample.supporting_indices)?;
            per_item.push(ItemScores {
                id: sample.id.clone(),
                em: em(trimmed.as_deref(), &golds)?,
                subem: subem(response, &golds)?,
                f1: token_f1(trimmed.as_deref(), &golds)?,
                attr_precision,
                attr_recall,
                attr_f1,
            });
        }
        let report = MetricReport::from_items(per_item)?;

        let xs: Vec<f64> = report.per_item.iter().map(|i| i.attr_f1).collect();
        let ys: Vec<f64> = report.per_item.iter().map(|i| i.em).collect();
        let fit = match fit_linear(&xs, &ys) {
            Ok(fit) => Some(fit),
            Err(MetricError::DegenerateXs) => None,
            Err(e) => return Err(e.into()),
        };

        self.ensure_output_dir()?;
        let report_path = self.config.report_path();
        let mut report_json =
            serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
        report_json.push('\n');
        fs::write(&report_path, report_json).map_err(|source| PipelineError::Io {
            path: report_path.display().to_string(),
            source,
        })?;

        let points_path = self.config.points_path();
        let mut points = String::from("attr_f1,em\n");
        for item in &report.per_item {
            points.push_str(&format!("{},{}\n", item.attr_f1, item.em));
        }
        fs::write(&points_path, points).map_err(|source| PipelineError::Io {
            path: points_path.display().to_string(),
            source,
        })?;

        Ok(EvaluationReport {
            report,
            fit,
            report_path,
            points_path,
        })
    }
}

/// Length statistics for an existing dataset file, detecting whether it holds
/// SFT or preference records.
pub fn stats_for_file(path: &Path) -> Result<(String, LengthStats), PipelineError> {
    let content = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let first = content
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or(DataError::EmptyRecords)?;
    let probe: serde_json::Value =
        serde_json::from_str(first).map_err(|e| DataError::MalformedLine {
            line: 1,
            detail: crate::jsonl::serde_detail(&e),
        })?;
    if probe.get("chosen").is_some() {
        let records: Vec<PoRecord> = crate::dataset::read_po_records(path)?;
        Ok(("preference".into(), po_length_stats(&records)?))
    } else {
        let records: Vec<SftRecord> = read_records(path)?;
        Ok(("sft".into(), sft_length_stats(&records)?))
    }
}

/// Loss values and gradient-check errors at canonical points, for the
/// `losscheck` subcommand.
pub fn losscheck_lines(beta: f64, step: f64, odds: OddsKind) -> Result<Vec<String>, PoMathError> {
    let cfg = OrpoConfig { beta };
    let mut lines = Vec::new();

    let halves = SequenceLikelihood::new(vec![0.5, 0.5])?;
    lines.push(format!(
        "sft_loss([0.5, 0.5])            = {:.12}  (ln 2 = {:.12})",
        sft_loss(&halves),
        std::f64::consts::LN_2
    ));
    lines.push(format!(
        "seq_odds([0.5])                 = {:.12}",
        seq_odds_with(&SequenceLikelihood::new(vec![0.5])?, odds)?
    ));
    lines.push(format!(
        "or_loss(identical, identical)   = {:.12}  (ln 2 = {:.12})",
        or_loss_with(&halves, &halves, odds)?,
        std::f64::consts::LN_2
    ));
    let win = SequenceLikelihood::new(vec![0.9, 0.8, 0.85])?;
    let lose = SequenceLikelihood::new(vec![0.55, 0.4, 0.6])?;
    lines.push(format!(
        "or_loss(strong, weak)           = {:.12}",
        or_loss_with(&win, &lose, odds)?
    ));
    lines.push(format!(
        "orpo_loss(strong, weak, beta={beta}) = {:.12}",
        orpo_loss_with(&win, &lose, &cfg, odds)?
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for kind in [LossKind::Sft, LossKind::OddsRatio, LossKind::Orpo] {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let len_w = rng.gen_range(1..=8);
            let len_l = rng.gen_range(1..=8);
            let sample = |rng: &mut ChaCha8Rng, len: usize| {
                SequenceLikelihood::new((0..len).map(|_| rng.gen_range(0.05..0.95)).collect())
            };
            let win = sample(&mut rng, len_w)?;
            let lose = sample(&mut rng, len_l)?;
            worst = worst.max(grad_check(kind, &win, &lose, &cfg, odds, step)?);
        }
        lines.push(format!(
            "grad_check({kind:?}, 20 random interior points, step={step:e}): max relative error = {worst:.3e}"
        ));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losscheck_reports_tight_gradients() {
        let lines = losscheck_lines(0.1, 1e-5, OddsKind::LengthNormalized).unwrap();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].contains("0.693147180560"));
        for line in &lines[5..] {
            let err: f64 = line
                .rsplit('=')
                .next()
                .unwrap()
                .trim()
                .parse()
                .expect("parsable error value");
            assert!(err < 1e-5, "{line}");
        }
    }
}
