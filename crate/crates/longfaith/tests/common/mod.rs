//! Synthetic corpora and config scaffolding shared by the integration tests.

#![allow(dead_code)]

use longfaith::corpus::{write_samples, Document, Sample};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// One synthetic distractor-setting sample with 20 documents.
pub fn synth_sample(id: &str, hop: u32) -> Sample {
    let documents: Vec<Document> = (1..=20)
        .map(|k| Document {
            title: format!("Entry {k} for {id}"),
            body: format!("Fact {k} about {id}: the recorded value is v{k}-{id}."),
        })
        .collect();
    let supporting: BTreeSet<usize> = match hop {
        2 => vec![3, 11],
        3 => vec![2, 9, 17],
        _ => vec![1, 6, 12, 19],
    }
    .into_iter()
    .collect();
    Sample {
        id: id.to_string(),
        question: format!("Which value does the ledger hold for {id}?"),
        answer: format!("answer-{id}"),
        answer_aliases: vec![format!("answer-{id}"), format!("alias-{id}")],
        documents,
        supporting_indices: supporting,
        hop_count: hop,
        question_type: None,
    }
}

/// A pool with the given per-hop counts, ids stable across calls.
pub fn synth_pool(two_hop: usize, three_hop: usize, four_hop: usize) -> Vec<Sample> {
    let mut pool = Vec::with_capacity(two_hop + three_hop + four_hop);
    for (hop, count) in [(2u32, two_hop), (3, three_hop), (4, four_hop)] {
        for i in 0..count {
            pool.push(synth_sample(&format!("{hop}hop_{i:04}"), hop));
        }
    }
    pool
}

pub fn write_corpus(path: &Path, samples: &[Sample]) {
    write_samples(samples, path).expect("write synthetic corpus");
}

/// A mock-backed pipeline config pointing at the given corpus and output dir.
pub fn config_toml(corpus: &Path, out_dir: &Path, seed: u64, quotas: &[(u32, usize)]) -> String {
    let quota_body = quotas
        .iter()
        .map(|(hop, count)| format!("\"{hop}\" = {count}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        r#"[corpus]
path = "{corpus}"
schema = "canonical"

[sampling]
seed = {seed}
quotas = {{ {quota_body} }}

[client]
mock = true
backoff_base_ms = 1

[output]
dir = "{out}"
"#,
        corpus = corpus.display(),
        out = out_dir.display(),
    )
}

pub fn write_config(
    dir: &Path,
    corpus: &Path,
    out_dir: &Path,
    seed: u64,
    quotas: &[(u32, usize)],
) -> PathBuf {
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, config_toml(corpus, out_dir, seed, quotas)).expect("write config");
    path
}
