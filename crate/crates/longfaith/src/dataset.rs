//! Assembly of supervised fine-tuning records and preference records, their
//! line-delimited serialization, and length-statistics reporting.
//!
//! An SFT record pairs the full-document inference instruction with one
//! synthesized chain. A preference record pairs the same instruction with the
//! grounded, cited chain as `chosen` and up to three lower-faithfulness
//! chains as `rejected`, in the fixed tag order (`wo_coc`, `wo_gt`,
//! `wo_doc`). Files are UTF-8, one JSON object per line, LF endings, stable
//! key order, so the same records always serialize to the same bytes.

use crate::chain::ReasoningChain;
use crate::corpus::Sample;
use crate::prompt::{
    render_inference_prompt, InferenceStyle, PromptError, PromptVariant, TemplateSet,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("sample {sample_id}: chain text is empty")]
    EmptyChain { sample_id: String },
    #[error("sample {sample_id}: rejected set is empty")]
    EmptyRejected { sample_id: String },
    #[error("sample {sample_id}: every rejected chain equals the chosen chain")]
    AllRejectedEqualChosen { sample_id: String },
    #[error("sample {sample_id}: a rejected entry equals the chosen text")]
    ChosenEqualsRejected { sample_id: String },
    #[error("record set is empty")]
    EmptyRecords,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Which faithfulness dimension a rejected chain violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectedTag {
    /// Reasoning without attribution (plain-step chain).
    WoCoc,
    /// Reasoning without the gold answer (possible misinformation).
    WoGt,
    /// Reasoning without the documents (parametric knowledge only).
    WoDoc,
}

impl RejectedTag {
    /// Fixed order used for the rejected list of every preference record.
    pub const ALL: [RejectedTag; 3] = [RejectedTag::WoCoc, RejectedTag::WoGt, RejectedTag::WoDoc];

    pub fn tag(self) -> &'static str {
        match self {
            Self::WoCoc => "wo_coc",
            Self::WoGt => "wo_gt",
            Self::WoDoc => "wo_doc",
        }
    }

    /// The synthesis regime whose chains this tag rejects.
    pub fn source_variant(self) -> PromptVariant {
        match self {
            Self::WoCoc => PromptVariant::CotGtDoc,
            Self::WoGt => PromptVariant::CocDoc,
            Self::WoDoc => PromptVariant::CotGtNodoc,
        }
    }
}

impl fmt::Display for RejectedTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RejectedTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "wo_coc" => Ok(Self::WoCoc),
            "wo_gt" => Ok(Self::WoGt),
            "wo_doc" => Ok(Self::WoDoc),
            other => Err(format!("unknown rejected tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub sample_id: String,
    pub variant: PromptVariant,
    pub hop: u32,
}

/// One supervised fine-tuning line: instruction over the full document set,
/// a synthesized chain as the target output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub output: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoMeta {
    pub sample_id: String,
    pub rejected_tags: Vec<RejectedTag>,
    pub hop: u32,
}

/// One preference line: the citation-style instruction, the grounded chain
/// as chosen, lower-faithfulness chains as rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoRecord {
    pub instruction: String,
    pub chosen: String,
    pub rejected: Vec<String>,
    pub meta: PoMeta,
}

impl PoRecord {
    fn validate(&self) -> Result<(), DataError> {
        if self.rejected.is_empty() {
            return Err(DataError::EmptyRejected {
                sample_id: self.meta.sample_id.clone(),
            });
        }
        if self.rejected.contains(&self.chosen) {
            return Err(DataError::ChosenEqualsRejected {
                sample_id: self.meta.sample_id.clone(),
            });
        }
        Ok(())
    }
}

/// Build one SFT record: the inference prompt over all documents as the
/// instruction, the given chain text as the output.
pub fn build_sft(
    templates: &TemplateSet,
    sample: &Sample,
    chain: &ReasoningChain,
    style: InferenceStyle,
    chain_variant: PromptVariant,
) -> Result<SftRecord, DataError> {
    if chain.raw.trim().is_empty() {
        return Err(DataError::EmptyChain {
            sample_id: sample.id.clone(),
        });
    }
    let instruction =
        render_inference_prompt(templates, style, &sample.question, &sample.documents)?;
    Ok(SftRecord {
        instruction: instruction.text,
        output: chain.raw.clone(),
        meta: SftMeta {
            sample_id: sample.id.clone(),
            variant: chain_variant,
            hop: sample.hop_count,
        },
    })
}

/// Build one preference record. Rejected chains follow the fixed tag order;
/// entries byte-equal to the chosen chain are dropped with a warning, and an
/// error is raised if nothing survives.
pub fn build_po(
    templates: &TemplateSet,
    sample: &Sample,
    chosen: &ReasoningChain,
    rejected: &BTreeMap<RejectedTag, ReasoningChain>,
) -> Result<PoRecord, DataError> {
    if chosen.raw.trim().is_empty() {
        return Err(DataError::EmptyChain {
            sample_id: sample.id.clone(),
        });
    }
    if rejected.is_empty() {
        return Err(DataError::EmptyRejected {
            sample_id: sample.id.clone(),
        });
    }
    let mut kept_texts = Vec::new();
    let mut kept_tags = Vec::new();
    for tag in RejectedTag::ALL {
        let Some(chain) = rejected.get(&tag) else {
            continue;
        };
        if chain.raw.trim().is_empty() {
            return Err(DataError::EmptyChain {
                sample_id: sample.id.clone(),
            });
        }
        if chain.raw == chosen.raw {
            log::warn!(
                "sample {}: rejected chain {tag} equals the chosen chain; dropping it",
                sample.id
            );
            continue;
        }
        kept_texts.push(chain.raw.clone());
        kept_tags.push(tag);
    }
    if kept_texts.is_empty() {
        return Err(DataError::AllRejectedEqualChosen {
            sample_id: sample.id.clone(),
        });
    }
    let instruction = render_inference_prompt(
        templates,
        InferenceStyle::Coc,
        &sample.question,
        &sample.documents,
    )?;
    Ok(PoRecord {
        instruction: instruction.text,
        chosen: chosen.raw.clone(),
        rejected: kept_texts,
        meta: PoMeta {
            sample_id: sample.id.clone(),
            rejected_tags: kept_tags,
            hop: sample.hop_count,
        },
    })
}

/// Write records as line-delimited JSON with stable key order. Returns the
/// record count; writing the same records twice yields identical bytes.
pub fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<usize, DataError> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("record serialization cannot fail");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|source| DataError::Write {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| DataError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(records.len())
}

/// Read line-delimited records, reporting the 1-based line number on any
/// malformed or truncated line.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let content = fs::read_to_string(path).map_err(|source| DataError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(raw).map_err(|e| DataError::MalformedLine {
            line: i + 1,
            detail: crate::jsonl::serde_detail(&e),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_sft_records(path: &Path) -> Result<Vec<SftRecord>, DataError> {
    read_records(path)
}

/// Read preference records and re-assert the chosen-differs-from-rejected
/// invariant on every line.
pub fn read_po_records(path: &Path) -> Result<Vec<PoRecord>, DataError> {
    let records: Vec<PoRecord> = read_records(path)?;
    for record in &records {
        record.validate()?;
    }
    Ok(records)
}

/// Character-count statistics over a record file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub avg_instruction_chars: f64,
    pub max_instruction_chars: usize,
    pub avg_output_chars: f64,
    pub max_output_chars: usize,
    /// Pooled over every rejected entry; absent for SFT records.
    pub avg_rejected_chars: Option<f64>,
    pub max_rejected_chars: Option<usize>,
}

impl fmt::Display for LengthStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "records: {}\ninstruction chars: avg {:.1}, max {}\noutput chars: avg {:.1}, max {}",
            self.count,
            self.avg_instruction_chars,
            self.max_instruction_chars,
            self.avg_output_chars,
            self.max_output_chars
        )?;
        if let (Some(avg), Some(max)) = (self.avg_rejected_chars, self.max_rejected_chars) {
            write!(f, "\nrejected chars: avg {avg:.1}, max {max}")?;
        }
        Ok(())
    }
}

fn char_stats(lengths: impl Iterator<Item = usize>) -> (f64, usize, usize) {
    let mut total = 0usize;
    let mut max = 0usize;
    let mut count = 0usize;
    for len in lengths {
        total += len;
        max = max.max(len);
        count += 1;
    }
    let avg = if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    };
    (avg, max, count)
}

pub fn sft_length_stats(records: &[SftRecord]) -> Result<LengthStats, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyRecords);
    }
    let (avg_i, max_i, _) = char_stats(records.iter().map(|r| r.instruction.chars().count()));
    let (avg_o, max_o, _) = char_stats(records.iter().map(|r| r.output.chars().count()));
    Ok(LengthStats {
        count: records.len(),
        avg_instruction_chars: avg_i,
        max_instruction_chars: max_i,
        avg_output_chars: avg_o,
        max_output_chars: max_o,
        avg_rejected_chars: None,
        max_rejected_chars: None,
    })
}

pub fn po_length_stats(records: &[PoRecord]) -> Result<LengthStats, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyRecords);
    }
    let (avg_i, max_i, _) = char_stats(records.iter().map(|r| r.instruction.chars().count()));
    let (avg_c, max_c, _) = char_stats(records.iter().map(|r| r.chosen.chars().count()));
    let (avg_r, max_r, pooled) = char_stats(
        records
            .iter()
            .flat_map(|r| r.rejected.iter().map(|t| t.chars().count())),
    );
    Ok(LengthStats {
        count: records.len(),
        avg_instruction_chars: avg_i,
        max_instruction_chars: max_i,
        avg_output_chars: avg_c,
        max_output_chars: max_c,
        avg_rejected_chars: (pooled > 0).then_some(avg_r),
        max_rejected_chars: (pooled > 0).then_some(max_r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests_support::sample_with_id;

    fn chain(text: &str) -> ReasoningChain {
        ReasoningChain::parse(text)
    }

    fn rejected_map(entries: &[(RejectedTag, &str)]) -> BTreeMap<RejectedTag, ReasoningChain> {
        entries.iter().map(|(t, s)| (*t, chain(s))).collect()
    }

    #[test]
    fn sft_record_carries_full_instruction_and_meta() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 3);
        let output = chain("From [1]: fact. The answer is answer-s1.");
        let record = build_sft(
            &templates,
            &sample,
            &output,
            InferenceStyle::Coc,
            PromptVariant::CocGtDoc,
        )
        .unwrap();
        // the instruction shows every document, not just the supporting ones
        for k in 1..=sample.documents.len() {
            assert!(record.instruction.contains(&format!("[{k}]")));
        }
        assert_eq!(record.output, output.raw);
        assert_eq!(record.meta.sample_id, "s1");
        assert_eq!(record.meta.variant, PromptVariant::CocGtDoc);
        assert_eq!(record.meta.hop, 3);
    }

    #[test]
    fn sft_rejects_empty_chain() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 2);
        let err = build_sft(
            &templates,
            &sample,
            &chain("   "),
            InferenceStyle::Coc,
            PromptVariant::CocGtDoc,
        );
        assert!(matches!(err, Err(DataError::EmptyChain { .. })));
    }

    #[test]
    fn po_record_orders_rejected_by_tag() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 2);
        let chosen = chain("good chain [2] [5]. The answer is answer-s1.");
        // insertion order differs from the fixed tag order on purpose
        let rejected = rejected_map(&[
            (RejectedTag::WoDoc, "parametric chain"),
            (RejectedTag::WoCoc, "plain chain"),
            (RejectedTag::WoGt, "wrong chain"),
        ]);
        let record = build_po(&templates, &sample, &chosen, &rejected).unwrap();
        assert_eq!(
            record.meta.rejected_tags,
            vec![RejectedTag::WoCoc, RejectedTag::WoGt, RejectedTag::WoDoc]
        );
        assert_eq!(
            record.rejected,
            vec!["plain chain", "wrong chain", "parametric chain"]
        );
    }

    #[test]
    fn po_single_tag_subset() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 2);
        let chosen = chain("good chain");
        let rejected = rejected_map(&[(RejectedTag::WoGt, "wrong chain")]);
        let record = build_po(&templates, &sample, &chosen, &rejected).unwrap();
        assert_eq!(record.meta.rejected_tags, vec![RejectedTag::WoGt]);
        assert_eq!(record.rejected.len(), 1);
    }

    #[test]
    fn po_empty_rejected_is_an_error() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 2);
        let err = build_po(&templates, &sample, &chain("good"), &BTreeMap::new());
        assert!(matches!(err, Err(DataError::EmptyRejected { .. })));
    }

    #[test]
    fn po_drops_duplicates_and_errors_when_all_equal() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 2);
        let chosen = chain("identical text");
        let partial = rejected_map(&[
            (RejectedTag::WoCoc, "identical text"),
            (RejectedTag::WoGt, "different text"),
        ]);
        let record = build_po(&templates, &sample, &chosen, &partial).unwrap();
        assert_eq!(record.meta.rejected_tags, vec![RejectedTag::WoGt]);

        let all_equal = rejected_map(&[(RejectedTag::WoCoc, "identical text")]);
        let err = build_po(&templates, &sample, &chosen, &all_equal);
        match err {
            Err(DataError::AllRejectedEqualChosen { sample_id }) => assert_eq!(sample_id, "s1"),
            other => panic!("expected all-equal error, got {other:?}"),
        }
    }

    #[test]
    fn po_and_sft_share_the_instruction() {
        let templates = TemplateSet::bundled();
        let sample = sample_with_id("s1", 2);
        let chosen = chain("good chain");
        let sft = build_sft(
            &templates,
            &sample,
            &chosen,
            InferenceStyle::Coc,
            PromptVariant::CocGtDoc,
        )
        .unwrap();
        let po = build_po(
            &templates,
            &sample,
            &chosen,
            &rejected_map(&[(RejectedTag::WoCoc, "other")]),
        )
        .unwrap();
        assert_eq!(sft.instruction, po.instruction);
    }

    #[test]
    fn records_round_trip_and_write_deterministically() {
        let templates = TemplateSet::bundled();
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<PoRecord> = (0..12)
            .map(|i| {
                let sample = sample_with_id(&format!("s{i}"), 2 + (i % 3));
                build_po(
                    &templates,
                    &sample,
                    &chain(&format!("chosen {i}")),
                    &rejected_map(&[
                        (RejectedTag::WoCoc, &format!("r1 {i}")),
                        (RejectedTag::WoGt, &format!("r2 {i}")),
                    ]),
                )
                .unwrap()
            })
            .collect();
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        assert_eq!(write_records(&records, &path_a).unwrap(), 12);
        write_records(&records, &path_b).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
        let reloaded = read_po_records(&path_a).unwrap();
        assert_eq!(reloaded, records);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let sample = sample_with_id("s1", 2);
        let templates = TemplateSet::bundled();
        let record = build_sft(
            &templates,
            &sample,
            &chain("out"),
            InferenceStyle::Coc,
            PromptVariant::CocGtDoc,
        )
        .unwrap();
        let mut serialized = serde_json::to_string(&record).unwrap();
        serialized.push('\n');
        let full = serde_json::to_string(&record).unwrap();
        serialized.push_str(&full[..full.len() / 2]);
        fs::write(&path, &serialized).unwrap();
        let err = read_sft_records(&path).unwrap_err().to_string();
        assert!(err.starts_with("line 2:"), "got: {err}");
    }

    #[test]
    fn read_po_rejects_chosen_equal_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("po.jsonl");
        let line = r#"{"instruction":"i","chosen":"same","rejected":["same"],"meta":{"sample_id":"s1","rejected_tags":["wo_coc"],"hop":2}}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        let err = read_po_records(&path);
        assert!(matches!(err, Err(DataError::ChosenEqualsRejected { .. })));
    }

    #[test]
    fn length_stats_means_and_maxima() {
        let meta = |id: &str| SftMeta {
            sample_id: id.into(),
            variant: PromptVariant::CocGtDoc,
            hop: 2,
        };
        let records = vec![
            SftRecord {
                instruction: "i".repeat(4),
                output: "o".repeat(10),
                meta: meta("a"),
            },
            SftRecord {
                instruction: "i".repeat(8),
                output: "o".repeat(20),
                meta: meta("b"),
            },
        ];
        let stats = sft_length_stats(&records).unwrap();
        assert_eq!(stats.avg_output_chars, 15.0);
        assert_eq!(stats.max_output_chars, 20);
        assert_eq!(stats.avg_instruction_chars, 6.0);
        assert!(stats.avg_rejected_chars.is_none());

        let single = sft_length_stats(&records[..1]).unwrap();
        assert_eq!(single.avg_output_chars, single.max_output_chars as f64);

        assert!(sft_length_stats(&[]).is_err());
    }

    #[test]
    fn po_length_stats_pool_rejected() {
        let record = |rejected: Vec<&str>| PoRecord {
            instruction: "i".into(),
            chosen: "c".into(),
            rejected: rejected.into_iter().map(String::from).collect(),
            meta: PoMeta {
                sample_id: "s".into(),
                rejected_tags: vec![RejectedTag::WoCoc],
                hop: 2,
            },
        };
        let records = vec![record(vec!["aa", "bbbb"]), record(vec!["cccccc"])];
        let stats = po_length_stats(&records).unwrap();
        // pooled mean over the flattened rejected list: (2 + 4 + 6) / 3
        assert_eq!(stats.avg_rejected_chars, Some(4.0));
        assert_eq!(stats.max_rejected_chars, Some(6));
    }
}
