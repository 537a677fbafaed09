//! Multi-hop QA corpus loading, validation, hop-balanced sampling, and
//! paragraph splitting.
//!
//! The canonical corpus file is line-delimited JSON with one record per line:
//! `id`, `question`, `answer`, `answer_aliases` (optional), `documents`
//! (array of `{title, text}`), `supporting_indices` (1-based), `hop`, and an
//! optional `type` tag. Schema tags select adapters that map the MuSiQue,
//! 2WikiMultiHopQA, and HotpotQA native layouts into this shape.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
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
    #[error("sample {id}: supporting index {index} out of range 1..={doc_count}")]
    SupportingIndexOutOfRange {
        id: String,
        index: usize,
        doc_count: usize,
    },
    #[error("sample {id}: supporting indices are empty")]
    EmptySupporting { id: String },
    #[error("sample {id}: document {index} has an empty body")]
    EmptyDocumentBody { id: String, index: usize },
    #[error("line {line}: duplicate sample id {id}")]
    DuplicateId { id: String, line: usize },
    #[error("sample {id}: hop count {hop} outside supported range 2..=4")]
    UnsupportedHop { id: String, hop: u32 },
    #[error("hop quota is empty or sums to zero")]
    EmptyQuota,
    #[error("hop {hop}: need {need}, have {have}")]
    StratumShortfall { hop: u32, need: usize, have: usize },
    #[error("paragraph count must be at least 1")]
    ZeroParagraphs,
}

/// One retrieved document: a title plus its text body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
}

/// One multi-hop QA item in the distractor setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub answer_aliases: Vec<String>,
    pub documents: Vec<Document>,
    pub supporting_indices: BTreeSet<usize>,
    #[serde(rename = "hop")]
    pub hop_count: u32,
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
}

impl Sample {
    /// Gold answer set used by the metrics: the answer first, then any
    /// distinct aliases.
    pub fn gold_answers(&self) -> Vec<String> {
        let mut golds = vec![self.answer.clone()];
        for alias in &self.answer_aliases {
            if !golds.contains(alias) {
                golds.push(alias.clone());
            }
        }
        golds
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.supporting_indices.is_empty() {
            return Err(CorpusError::EmptySupporting {
                id: self.id.clone(),
            });
        }
        for &index in &self.supporting_indices {
            if index < 1 || index > self.documents.len() {
                return Err(CorpusError::SupportingIndexOutOfRange {
                    id: self.id.clone(),
                    index,
                    doc_count: self.documents.len(),
                });
            }
        }
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.body.trim().is_empty() {
                return Err(CorpusError::EmptyDocumentBody {
                    id: self.id.clone(),
                    index: i + 1,
                });
            }
        }
        if !(2..=4).contains(&self.hop_count) {
            return Err(CorpusError::UnsupportedHop {
                id: self.id.clone(),
                hop: self.hop_count,
            });
        }
        Ok(())
    }
}

/// Which on-disk layout a corpus file uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaTag {
    Canonical,
    Musique,
    #[serde(rename = "2wiki")]
    TwoWiki,
    Hotpotqa,
}

impl FromStr for SchemaTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(Self::Canonical),
            "musique" => Ok(Self::Musique),
            "2wiki" => Ok(Self::TwoWiki),
            "hotpotqa" => Ok(Self::Hotpotqa),
            other => Err(format!(
                "unknown corpus schema {other:?} (expected canonical, musique, 2wiki, or hotpotqa)"
            )),
        }
    }
}

impl fmt::Display for SchemaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Canonical => "canonical",
            Self::Musique => "musique",
            Self::TwoWiki => "2wiki",
            Self::Hotpotqa => "hotpotqa",
        };
        f.write_str(name)
    }
}

#[derive(Deserialize)]
struct CanonicalRecord {
    id: String,
    question: String,
    answer: String,
    #[serde(default)]
    answer_aliases: Vec<String>,
    documents: Vec<Document>,
    supporting_indices: Vec<usize>,
    hop: u32,
    #[serde(rename = "type", default)]
    question_type: Option<String>,
}

#[derive(Deserialize)]
struct MusiqueParagraph {
    title: String,
    paragraph_text: String,
    #[serde(default)]
    is_supporting: bool,
}

#[derive(Deserialize)]
struct MusiqueRecord {
    id: String,
    question: String,
    answer: String,
    #[serde(default)]
    answer_aliases: Vec<String>,
    paragraphs: Vec<MusiqueParagraph>,
}

/// HotpotQA and 2WikiMultiHopQA share the `context`/`supporting_facts` shape.
#[derive(Deserialize)]
struct WikiHopRecord {
    #[serde(rename = "_id")]
    id: String,
    question: String,
    answer: String,
    context: Vec<(String, Vec<String>)>,
    supporting_facts: Vec<(String, usize)>,
    #[serde(rename = "type", default)]
    question_type: Option<String>,
}

fn canonical_to_sample(record: CanonicalRecord) -> Sample {
    let answer_aliases = if record.answer_aliases.is_empty() {
        vec![record.answer.clone()]
    } else {
        record.answer_aliases
    };
    Sample {
        id: record.id,
        question: record.question,
        answer: record.answer,
        answer_aliases,
        documents: record.documents,
        supporting_indices: record.supporting_indices.into_iter().collect(),
        hop_count: record.hop,
        question_type: record.question_type,
    }
}

fn musique_to_sample(record: MusiqueRecord, line: usize) -> Result<Sample, CorpusError> {
    // MuSiQue ids lead with the hop count, e.g. "2hop__1234_5678".
    let hop: u32 = record
        .id
        .split("hop")
        .next()
        .and_then(|digits| digits.parse().ok())
        .ok_or_else(|| CorpusError::MalformedLine {
            line,
            detail: format!("cannot derive hop count from id {:?}", record.id),
        })?;
    let supporting: BTreeSet<usize> = record
        .paragraphs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_supporting)
        .map(|(i, _)| i + 1)
        .collect();
    let documents = record
        .paragraphs
        .into_iter()
        .map(|p| Document {
            title: p.title,
            body: p.paragraph_text,
        })
        .collect();
    let answer_aliases = if record.answer_aliases.is_empty() {
        vec![record.answer.clone()]
    } else {
        record.answer_aliases
    };
    Ok(Sample {
        id: record.id,
        question: record.question,
        answer: record.answer,
        answer_aliases,
        documents,
        supporting_indices: supporting,
        hop_count: hop,
        question_type: None,
    })
}

fn wikihop_to_sample(record: WikiHopRecord, schema: SchemaTag) -> Sample {
    let supporting: BTreeSet<usize> = record
        .supporting_facts
        .iter()
        .filter_map(|(title, _)| {
            record
                .context
                .iter()
                .position(|(t, _)| t == title)
                .map(|i| i + 1)
        })
        .collect();
    let documents = record
        .context
        .into_iter()
        .map(|(title, sentences)| Document {
            title,
            body: sentences.join(" ").trim().to_string(),
        })
        .collect();
    let hop = match (schema, record.question_type.as_deref()) {
        (SchemaTag::TwoWiki, Some("bridge_comparison")) => 4,
        _ => 2,
    };
    let answer_aliases = vec![record.answer.clone()];
    Sample {
        id: record.id,
        question: record.question,
        answer: record.answer,
        answer_aliases,
        documents,
        supporting_indices: supporting,
        hop_count: hop,
        question_type: record.question_type,
    }
}

/// Load one corpus file, mapping the given schema into canonical samples and
/// enforcing every sample invariant. Returns samples in file order.
pub fn load_samples(path: &Path, schema: SchemaTag) -> Result<Vec<Sample>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| CorpusError::MalformedLine {
            line,
            detail: crate::jsonl::serde_detail(&e),
        };
        let sample = match schema {
            SchemaTag::Canonical => canonical_to_sample(
                serde_json::from_str::<CanonicalRecord>(raw).map_err(parse_err)?,
            ),
            SchemaTag::Musique => musique_to_sample(
                serde_json::from_str::<MusiqueRecord>(raw).map_err(parse_err)?,
                line,
            )?,
            SchemaTag::TwoWiki | SchemaTag::Hotpotqa => wikihop_to_sample(
                serde_json::from_str::<WikiHopRecord>(raw).map_err(parse_err)?,
                schema,
            ),
        };
        if !seen_ids.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: sample.id,
                line,
            });
        }
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Serialize samples to the canonical line-delimited form. Key order is
/// stable, so writing the same samples twice is byte-identical.
pub fn write_samples(samples: &[Sample], path: &Path) -> Result<usize, CorpusError> {
    let mut out = Vec::new();
    for sample in samples {
        serde_json::to_writer(&mut out, sample).expect("sample serialization cannot fail");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&out).map_err(|source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(samples.len())
}

/// Required sample count per hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopQuota {
    counts: BTreeMap<u32, usize>,
}

impl HopQuota {
    pub fn new(counts: BTreeMap<u32, usize>) -> Result<Self, CorpusError> {
        if counts.values().sum::<usize>() == 0 {
            return Err(CorpusError::EmptyQuota);
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &BTreeMap<u32, usize> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Draw exactly `quota[hop]` samples per hop via a seeded shuffle within each
/// hop stratum. Deterministic: the same pool, quota, and seed produce the
/// same output order (strata concatenated in ascending hop order).
pub fn sample_balanced(
    samples: &[Sample],
    quota: &HopQuota,
    seed: u64,
) -> Result<Vec<Sample>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(quota.total());
    for (&hop, &need) in quota.counts() {
        if need == 0 {
            continue;
        }
        let mut stratum: Vec<&Sample> = samples.iter().filter(|s| s.hop_count == hop).collect();
        if stratum.len() < need {
            return Err(CorpusError::StratumShortfall {
                hop,
                need,
                have: stratum.len(),
            });
        }
        stratum.shuffle(&mut rng);
        selected.extend(stratum.into_iter().take(need).cloned());
    }
    Ok(selected)
}

/// Split a body into at most `n` chunks of whitespace tokens, in order, with
/// chunk sizes differing by at most one; oversized chunks go last. Rejoining
/// the chunks with single spaces reproduces the whitespace-normalized body.
pub fn split_paragraphs(body: &str, n: usize) -> Result<Vec<String>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroParagraphs);
    }
    let tokens: Vec<&str> = body.split_whitespace().collect();
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let chunks = n.min(tokens.len());
    let base = tokens.len() / chunks;
    let remainder = tokens.len() % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut cursor = 0;
    for i in 0..chunks {
        // The last `remainder` chunks absorb one extra token each.
        let size = if i >= chunks - remainder {
            base + 1
        } else {
            base
        };
        out.push(tokens[cursor..cursor + size].join(" "));
        cursor += size;
    }
    debug_assert_eq!(cursor, tokens.len());
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_with_hop(id: &str, hop: u32) -> Sample {
        tests_support::sample_with_id(id, hop)
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file
    }

    const VALID_LINE: &str = r#"{"id":"s1","question":"q","answer":"a","answer_aliases":["a"],"documents":[{"title":"T","text":"body"}],"supporting_indices":[1],"hop":2}"#;

    #[test]
    fn load_valid_lines_in_order() {
        let l2 = VALID_LINE.replace("s1", "s2");
        let l3 = VALID_LINE.replace("s1", "s3");
        let file = write_lines(&[VALID_LINE, &l2, &l3]);
        let samples = load_samples(file.path(), SchemaTag::Canonical).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].id, "s1");
        assert_eq!(samples[2].id, "s3");
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let broken = r#"{"id":"s2","question":"q","documents":[{"title":"T","text":"b"}],"supporting_indices":[1],"hop":2}"#;
        let file = write_lines(&[VALID_LINE, broken]);
        let err = load_samples(file.path(), SchemaTag::Canonical)
            .unwrap_err()
            .to_string();
        assert_eq!(err, "line 2: missing field answer");
    }

    #[test]
    fn out_of_range_supporting_index_names_sample() {
        let bad = r#"{"id":"bad-one","question":"q","answer":"a","documents":[{"title":"T","text":"b"}],"supporting_indices":[25],"hop":2}"#;
        let file = write_lines(&[bad]);
        let err = load_samples(file.path(), SchemaTag::Canonical)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bad-one"), "error should name the id: {err}");
        assert!(err.contains("25"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let file = write_lines(&[VALID_LINE, VALID_LINE]);
        let err = load_samples(file.path(), SchemaTag::Canonical).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn empty_aliases_default_to_answer() {
        let no_aliases = r#"{"id":"s1","question":"q","answer":"gold","documents":[{"title":"T","text":"b"}],"supporting_indices":[1],"hop":2}"#;
        let file = write_lines(&[no_aliases]);
        let samples = load_samples(file.path(), SchemaTag::Canonical).unwrap();
        assert_eq!(samples[0].answer_aliases, vec!["gold".to_string()]);
        assert_eq!(samples[0].gold_answers(), vec!["gold".to_string()]);
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let samples: Vec<Sample> = (0..8)
            .map(|i| sample_with_hop(&format!("s{i}"), 2 + (i % 3)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        write_samples(&samples, &path_a).unwrap();
        let reloaded = load_samples(&path_a, SchemaTag::Canonical).unwrap();
        assert_eq!(reloaded, samples);
        write_samples(&reloaded, &path_b).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
    }

    #[test]
    fn musique_schema_maps_supporting_paragraphs() {
        let line = r#"{"id":"2hop__12_34","question":"q","answer":"a","answer_aliases":[],"paragraphs":[{"idx":0,"title":"A","paragraph_text":"one","is_supporting":false},{"idx":1,"title":"B","paragraph_text":"two","is_supporting":true},{"idx":2,"title":"C","paragraph_text":"three","is_supporting":true}]}"#;
        let file = write_lines(&[line]);
        let samples = load_samples(file.path(), SchemaTag::Musique).unwrap();
        assert_eq!(samples[0].hop_count, 2);
        assert_eq!(
            samples[0].supporting_indices,
            [2, 3].into_iter().collect::<BTreeSet<_>>()
        );
        assert_eq!(samples[0].documents[1].body, "two");
    }

    #[test]
    fn hotpot_schema_maps_titles_to_indices() {
        let line = r#"{"_id":"h1","question":"q","answer":"a","context":[["Alpha",["s1.","s2."]],["Beta",["s3."]]],"supporting_facts":[["Beta",0],["Alpha",1]],"type":"bridge"}"#;
        let file = write_lines(&[line]);
        let samples = load_samples(file.path(), SchemaTag::Hotpotqa).unwrap();
        assert_eq!(samples[0].hop_count, 2);
        assert_eq!(
            samples[0].supporting_indices,
            [1, 2].into_iter().collect::<BTreeSet<_>>()
        );
        assert_eq!(samples[0].documents[0].body, "s1. s2.");
        assert_eq!(samples[0].question_type.as_deref(), Some("bridge"));
    }

    #[test]
    fn twowiki_bridge_comparison_is_four_hop() {
        let line = r#"{"_id":"w1","question":"q","answer":"a","context":[["Alpha",["s1."]]],"supporting_facts":[["Alpha",0]],"type":"bridge_comparison"}"#;
        let file = write_lines(&[line]);
        let samples = load_samples(file.path(), SchemaTag::TwoWiki).unwrap();
        assert_eq!(samples[0].hop_count, 4);
    }

    #[test]
    fn balanced_sampling_exact_counts_and_determinism() {
        let mut pool = Vec::new();
        for hop in [2u32, 3, 4] {
            for i in 0..40 {
                pool.push(sample_with_hop(&format!("{hop}hop_{i}"), hop));
            }
        }
        let quota = HopQuota::new([(2, 10), (3, 5), (4, 20)].into_iter().collect()).unwrap();
        let first = sample_balanced(&pool, &quota, 99).unwrap();
        let second = sample_balanced(&pool, &quota, 99).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.len(), 35);
        for (hop, want) in [(2u32, 10usize), (3, 5), (4, 20)] {
            let got = first.iter().filter(|s| s.hop_count == hop).count();
            assert_eq!(got, want, "hop {hop}");
        }
        let other_seed = sample_balanced(&pool, &quota, 100).unwrap();
        assert_ne!(first, other_seed);
    }

    #[test]
    fn balanced_sampling_zero_quota_skips_hop() {
        let pool: Vec<Sample> = (0..6)
            .map(|i| sample_with_hop(&format!("s{i}"), if i < 3 { 2 } else { 3 }))
            .collect();
        let quota = HopQuota::new([(2, 0), (3, 2)].into_iter().collect()).unwrap();
        let picked = sample_balanced(&pool, &quota, 1).unwrap();
        assert_eq!(picked.len(), 2);
        assert!(picked.iter().all(|s| s.hop_count == 3));
    }

    #[test]
    fn balanced_sampling_shortfall_message() {
        let pool: Vec<Sample> = (0..3)
            .map(|i| sample_with_hop(&format!("s{i}"), 2))
            .collect();
        let quota = HopQuota::new([(2, 5)].into_iter().collect()).unwrap();
        let err = sample_balanced(&pool, &quota, 0).unwrap_err().to_string();
        assert_eq!(err, "hop 2: need 5, have 3");
    }

    #[test]
    fn quota_must_be_positive() {
        assert!(matches!(
            HopQuota::new([(2, 0)].into_iter().collect()),
            Err(CorpusError::EmptyQuota)
        ));
    }

    fn numbered_text(tokens: usize) -> String {
        (0..tokens)
            .map(|i| format!("t{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn split_even_division() {
        let chunks = split_paragraphs(&numbered_text(40), 20).unwrap();
        assert_eq!(chunks.len(), 20);
        assert!(chunks.iter().all(|c| c.split_whitespace().count() == 2));
    }

    #[test]
    fn split_remainder_goes_last() {
        let chunks = split_paragraphs(&numbered_text(41), 20).unwrap();
        assert_eq!(chunks.len(), 20);
        let sizes: Vec<usize> = chunks
            .iter()
            .map(|c| c.split_whitespace().count())
            .collect();
        assert_eq!(&sizes[..19], vec![2; 19].as_slice());
        assert_eq!(sizes[19], 3);
    }

    #[test]
    fn split_short_text_yields_single_tokens() {
        let chunks = split_paragraphs(&numbered_text(5), 20).unwrap();
        assert_eq!(chunks.len(), 5);
        assert!(chunks.iter().all(|c| c.split_whitespace().count() == 1));
    }

    #[test]
    fn split_rejects_zero() {
        assert!(matches!(
            split_paragraphs("a b", 0),
            Err(CorpusError::ZeroParagraphs)
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_and_balances(
            tokens in 1usize..200,
            n in 1usize..40,
        ) {
            let text = numbered_text(tokens);
            let chunks = split_paragraphs(&text, n).unwrap();
            prop_assert_eq!(chunks.len(), n.min(tokens));
            prop_assert_eq!(chunks.join(" "), text);
            let sizes: Vec<usize> = chunks.iter().map(|c| c.split_whitespace().count()).collect();
            let max = sizes.iter().max().unwrap();
            let min = sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn split_normalizes_messy_whitespace(raw in "[a-c \t\n]{0,60}") {
            let chunks = split_paragraphs(&raw, 7).unwrap();
            let normalized = raw.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(chunks.join(" "), normalized);
        }
    }
}
