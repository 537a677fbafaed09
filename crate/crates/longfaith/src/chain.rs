//! Parsing of model outputs into structured reasoning chains: citation
//! extraction, final-answer extraction, and faithfulness diagnostics.

use crate::corpus::Sample;
use crate::metrics;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::OnceLock;

/// A synthesized or model-produced reasoning chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub raw: String,
    pub citations_in_order: Vec<usize>,
    pub citation_set: BTreeSet<usize>,
    pub final_answer: Option<String>,
}

impl ReasoningChain {
    /// Parse raw model text, extracting citations and the final answer.
    pub fn parse(raw: &str) -> Self {
        let (citations_in_order, citation_set) = extract_citations(raw);
        Self {
            raw: raw.to_string(),
            citations_in_order,
            citation_set,
            final_answer: extract_final_answer(raw),
        }
    }
}

/// Faithfulness diagnostics of one chain against its source sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainQuality {
    pub contains_gold: bool,
    pub citation_precision: f64,
    pub citation_recall: f64,
}

fn bracket_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]+)\]").expect("static regex"))
}

/// Extract bracketed citations like `[1]` or `[1, 2]` in appearance order.
///
/// A bracket group counts only when every comma/whitespace-separated member
/// parses as a positive integer; anything else (`[sic]`, `[see 3]`) is
/// ignored. Returns the in-order list (with repeats) and the deduplicated set.
pub fn extract_citations(text: &str) -> (Vec<usize>, BTreeSet<usize>) {
    let mut in_order = Vec::new();
    for captures in bracket_regex().captures_iter(text) {
        let inner = &captures[1];
        let members: Vec<&str> = inner
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if members.is_empty() {
            continue;
        }
        let parsed: Option<Vec<usize>> = members
            .iter()
            .map(|m| m.parse::<usize>().ok().filter(|&k| k >= 1))
            .collect();
        if let Some(indices) = parsed {
            in_order.extend(indices);
        }
    }
    let set = in_order.iter().copied().collect();
    (in_order, set)
}

const ANSWER_MARKER: &str = "the answer is";

/// Extract the text after the last case-insensitive "the answer is",
/// trimmed of whitespace, one surrounding quote pair, and a single trailing
/// period. Returns `None` when the marker is absent or the remainder is
/// empty.
pub fn extract_final_answer(text: &str) -> Option<String> {
    let lowered = text.to_ascii_lowercase();
    let pos = lowered.rfind(ANSWER_MARKER)?;
    let tail = &text[pos + ANSWER_MARKER.len()..];
    let mut answer = tail.trim();
    if let Some(stripped) = answer.strip_suffix('.') {
        answer = stripped.trim_end();
    }
    answer = strip_quote_pair(answer).trim();
    if answer.is_empty() {
        None
    } else {
        Some(answer.to_string())
    }
}

fn strip_quote_pair(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|t| t.strip_suffix(close)) {
            if !inner.is_empty() {
                return inner;
            }
        }
    }
    s
}

/// Score a chain against its sample: gold containment via substring match
/// over the whole text, citation precision/recall against the supporting set.
pub fn assess_chain(chain: &ReasoningChain, sample: &Sample) -> ChainQuality {
    let golds = sample.gold_answers();
    let contains_gold =
        metrics::subem(&chain.raw, &golds).expect("gold answers are never empty") == 1.0;
    let (citation_precision, citation_recall, _) =
        metrics::attribution_f1(&chain.citation_set, &sample.supporting_indices)
            .expect("sample invariants guarantee a non-empty supporting set");
    ChainQuality {
        contains_gold,
        citation_precision,
        citation_recall,
    }
}
