//! Rule-based QA and attribution metrics.
//!
//! Answer-level scoring (EM, SubEM, token F1) runs on normalized text, where
//! normalization lowercases, strips punctuation, drops the articles
//! `a`/`an`/`the`, and collapses whitespace. Attribution F1 compares a chain's
//! cited document indices against the annotated supporting set. All per-item
//! values live in [0, 1]; aggregates are reported as percentages.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("gold answer set is empty")]
    EmptyGolds,
    #[error("supporting set is empty")]
    EmptySupporting,
    #[error("regression needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("regression x values are all equal")]
    DegenerateXs,
    #[error("regression x/y lengths differ: {xs} vs {ys}")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("cannot aggregate an empty report")]
    EmptyReport,
}

/// Lowercase, strip punctuation, drop whole-word articles, collapse whitespace.
///
/// Idempotent: `normalize(normalize(x)) == normalize(x)`.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match of the trimmed answer against any gold, after normalization.
pub fn em(prediction: Option<&str>, golds: &[String]) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGolds);
    }
    let Some(pred) = prediction else {
        return Ok(0.0);
    };
    let pred_norm = normalize(pred);
    let hit = golds.iter().any(|g| normalize(g) == pred_norm);
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Substring exact match: does any normalized gold occur anywhere in the
/// normalized full response?
pub fn subem(full_response: &str, golds: &[String]) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGolds);
    }
    let response_norm = normalize(full_response);
    let hit = golds.iter().any(|g| response_norm.contains(&normalize(g)));
    Ok(if hit { 1.0 } else { 0.0 })
}

fn token_counts(text: &str) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for tok in text.split_whitespace() {
        *counts.entry(tok).or_insert(0) += 1;
    }
    counts
}

/// Bag-of-tokens F1 of the trimmed answer, maximized over the golds.
///
/// Tokens are counted with multiplicity. If either side normalizes to the
/// empty string the pair scores 1 on exact equality and 0 otherwise, which
/// keeps `em <= token_f1` for every input.
pub fn token_f1(prediction: Option<&str>, golds: &[String]) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGolds);
    }
    let Some(pred) = prediction else {
        return Ok(0.0);
    };
    let pred_norm = normalize(pred);
    let pred_counts = token_counts(&pred_norm);
    let pred_total: usize = pred_counts.values().sum();

    let mut best = 0.0_f64;
    for gold in golds {
        let gold_norm = normalize(gold);
        let score = if pred_norm.is_empty() || gold_norm.is_empty() {
            if pred_norm == gold_norm {
                1.0
            } else {
                0.0
            }
        } else {
            let gold_counts = token_counts(&gold_norm);
            let gold_total: usize = gold_counts.values().sum();
            let overlap: usize = pred_counts
                .iter()
                .map(|(tok, &n)| n.min(gold_counts.get(tok).copied().unwrap_or(0)))
                .sum();
            if overlap == 0 {
                0.0
            } else {
                let precision = overlap as f64 / pred_total as f64;
                let recall = overlap as f64 / gold_total as f64;
                2.0 * precision * recall / (precision + recall)
            }
        };
        best = best.max(score);
    }
    Ok(best)
}

/// Precision/recall/F1 between cited document indices and the supporting set.
///
/// An empty citation set scores precision 1.0 (no false claims were made) and
/// recall 0; out-of-range citations stay in the denominator and never land in
/// the intersection.
pub fn attribution_f1(
    citation_set: &BTreeSet<usize>,
    supporting: &BTreeSet<usize>,
) -> Result<(f64, f64, f64), MetricError> {
    if supporting.is_empty() {
        return Err(MetricError::EmptySupporting);
    }
    let hits = citation_set.intersection(supporting).count();
    let precision = if citation_set.is_empty() {
        1.0
    } else {
        hits as f64 / citation_set.len() as f64
    };
    let recall = hits as f64 / supporting.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// Ordinary least squares fit with the Pearson correlation coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

/// Fit `y = slope * x + intercept` by least squares; `r` is Pearson's
/// correlation (0 by convention when the ys are constant).
pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<RegressionFit, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(MetricError::DegenerateXs);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r = if syy == 0.0 {
        0.0
    } else {
        sxy / (sxx.sqrt() * syy.sqrt())
    };
    Ok(RegressionFit {
        slope,
        intercept,
        r,
    })
}

/// Per-item metric row, one per evaluated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub em: f64,
    pub subem: f64,
    pub f1: f64,
    pub attr_precision: f64,
    pub attr_recall: f64,
    pub attr_f1: f64,
}

/// Unweighted means over the per-item rows, scaled to percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub em: f64,
    pub subem: f64,
    pub f1: f64,
    pub attr_precision: f64,
    pub attr_recall: f64,
    pub attr_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_item: Vec<ItemScores>,
    pub aggregate: AggregateScores,
}

impl MetricReport {
    pub fn from_items(per_item: Vec<ItemScores>) -> Result<Self, MetricError> {
        if per_item.is_empty() {
            return Err(MetricError::EmptyReport);
        }
        let n = per_item.len() as f64;
        let pct = |f: fn(&ItemScores) -> f64| per_item.iter().map(f).sum::<f64>() / n * 100.0;
        let aggregate = AggregateScores {
            em: pct(|i| i.em),
            subem: pct(|i| i.subem),
            f1: pct(|i| i.f1),
            attr_precision: pct(|i| i.attr_precision),
            attr_recall: pct(|i| i.attr_recall),
            attr_f1: pct(|i| i.attr_f1),
        };
        Ok(Self {
            per_item,
            aggregate,
        })
    }
}
