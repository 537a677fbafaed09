//! Rendering of the four synthesis prompt regimes and the inference-time
//! prompts, with stable document numbering.
//!
//! Templates are plain-text assets with the named placeholders `{question}`,
//! `{answer}`, `{documents}`, and `{instruction}`. Bundled defaults are
//! compiled in; a template directory can override them. Ground-truth variants
//! show only the supporting documents, numbered by their original 1-based
//! indices, so synthesized citations stay valid against the full document
//! list used at training time.

use crate::corpus::{Document, Sample};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Citation-style reasoning instruction shared by all CoC prompts.
pub const COC_INSTRUCTION: &str =
    "Let's reason step by step while citing the document using [1], [2], etc.";
/// Plain step-by-step instruction used by CoT prompts.
pub const COT_INSTRUCTION: &str = "Let's reason step by step.";
/// Appended to every prompt so responses end in a machine-trimmable answer.
pub const ANSWER_SENTENCE_INSTRUCTION: &str =
    "Finish with the sentence \"The answer is\" followed by the final answer.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("failed to read template {path}: {source}")]
    TemplateRead {
        path: String,
        source: std::io::Error,
    },
    #[error("template {template}: placeholder {placeholder} is not allowed here")]
    PlaceholderNotAllowed {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error(
        "template {template}: placeholder {placeholder} must appear exactly once, found {found}"
    )]
    PlaceholderCount {
        template: &'static str,
        placeholder: &'static str,
        found: usize,
    },
    #[error("inference prompt needs at least one document")]
    EmptyDocuments,
}

/// The four synthesis regimes. `CocGtDoc` is the unique "chosen" regime; the
/// other three produce the rejected chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Citation prompting with the gold answer and supporting documents.
    CocGtDoc,
    /// Plain step prompting with the gold answer and supporting documents.
    CotGtDoc,
    /// Citation prompting over the full document set, no gold answer.
    CocDoc,
    /// Plain step prompting with the gold answer only, no documents.
    CotGtNodoc,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 4] = [
        PromptVariant::CocGtDoc,
        PromptVariant::CotGtDoc,
        PromptVariant::CocDoc,
        PromptVariant::CotGtNodoc,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::CocGtDoc => "coc_gt_doc",
            Self::CotGtDoc => "cot_gt_doc",
            Self::CocDoc => "coc_doc",
            Self::CotGtNodoc => "cot_gt_nodoc",
        }
    }

    pub fn is_coc(self) -> bool {
        matches!(self, Self::CocGtDoc | Self::CocDoc)
    }

    pub fn includes_gold(self) -> bool {
        !matches!(self, Self::CocDoc)
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "coc_gt_doc" => Ok(Self::CocGtDoc),
            "cot_gt_doc" => Ok(Self::CotGtDoc),
            "coc_doc" => Ok(Self::CocDoc),
            "cot_gt_nodoc" => Ok(Self::CotGtNodoc),
            other => Err(format!("unknown prompt variant {other:?}")),
        }
    }
}

/// Inference-time prompting style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceStyle {
    Coc,
    Cot,
}

impl InferenceStyle {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Coc => "coc",
            Self::Cot => "cot",
        }
    }
}

impl FromStr for InferenceStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coc" => Ok(Self::Coc),
            "cot" => Ok(Self::Cot),
            other => Err(format!("unknown inference style {other:?}")),
        }
    }
}

/// What a rendered prompt was rendered for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Synthesis(PromptVariant),
    Inference(InferenceStyle),
}

/// A fully rendered prompt plus the document numbering it exposed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub kind: PromptKind,
    pub sample_id: String,
    pub doc_numbering: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TemplateKey {
    SynthCocGtDoc,
    SynthCotGtDoc,
    SynthCocDoc,
    SynthCotGtNodoc,
    InferCoc,
    InferCot,
}

impl TemplateKey {
    const ALL: [TemplateKey; 6] = [
        TemplateKey::SynthCocGtDoc,
        TemplateKey::SynthCotGtDoc,
        TemplateKey::SynthCocDoc,
        TemplateKey::SynthCotGtNodoc,
        TemplateKey::InferCoc,
        TemplateKey::InferCot,
    ];

    fn file_name(self) -> &'static str {
        match self {
            Self::SynthCocGtDoc => "synthesis_coc_gt_doc.txt",
            Self::SynthCotGtDoc => "synthesis_cot_gt_doc.txt",
            Self::SynthCocDoc => "synthesis_coc_doc.txt",
            Self::SynthCotGtNodoc => "synthesis_cot_gt_nodoc.txt",
            Self::InferCoc => "inference_coc.txt",
            Self::InferCot => "inference_cot.txt",
        }
    }

    fn bundled(self) -> &'static str {
        match self {
            Self::SynthCocGtDoc => include_str!("../templates/synthesis_coc_gt_doc.txt"),
            Self::SynthCotGtDoc => include_str!("../templates/synthesis_cot_gt_doc.txt"),
            Self::SynthCocDoc => include_str!("../templates/synthesis_coc_doc.txt"),
            Self::SynthCotGtNodoc => include_str!("../templates/synthesis_cot_gt_nodoc.txt"),
            Self::InferCoc => include_str!("../templates/inference_coc.txt"),
            Self::InferCot => include_str!("../templates/inference_cot.txt"),
        }
    }

    fn for_variant(variant: PromptVariant) -> Self {
        match variant {
            PromptVariant::CocGtDoc => Self::SynthCocGtDoc,
            PromptVariant::CotGtDoc => Self::SynthCotGtDoc,
            PromptVariant::CocDoc => Self::SynthCocDoc,
            PromptVariant::CotGtNodoc => Self::SynthCotGtNodoc,
        }
    }

    fn for_style(style: InferenceStyle) -> Self {
        match style {
            InferenceStyle::Coc => Self::InferCoc,
            InferenceStyle::Cot => Self::InferCot,
        }
    }
}

/// The loaded template assets, one text per prompt regime.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKey, String>,
}

impl TemplateSet {
    /// The compiled-in default templates.
    pub fn bundled() -> Self {
        let templates = TemplateKey::ALL
            .into_iter()
            .map(|key| (key, key.bundled().to_string()))
            .collect();
        Self { templates }
    }

    /// Load all six template files from a directory, by their fixed names.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for key in TemplateKey::ALL {
            let path = dir.join(key.file_name());
            let text = fs::read_to_string(&path).map_err(|source| PromptError::TemplateRead {
                path: path.display().to_string(),
                source,
            })?;
            templates.insert(key, text);
        }
        Ok(Self { templates })
    }

    fn get(&self, key: TemplateKey) -> &str {
        self.templates.get(&key).map(String::as_str).unwrap_or("")
    }
}

fn format_documents(numbered: &[(usize, &Document)]) -> String {
    numbered
        .iter()
        .map(|(k, doc)| {
            if doc.title.trim().is_empty() {
                format!("[{k}]\n{}", doc.body)
            } else {
                format!("[{k}] {}\n{}", doc.title, doc.body)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn instruction_for(is_coc: bool) -> String {
    let style = if is_coc {
        COC_INSTRUCTION
    } else {
        COT_INSTRUCTION
    };
    format!("{style} {ANSWER_SENTENCE_INSTRUCTION}")
}

const PLACEHOLDERS: [&str; 4] = ["{question}", "{answer}", "{documents}", "{instruction}"];

/// Substitute the given slots into the template. Every provided placeholder
/// must occur exactly once; any other known placeholder must be absent.
fn fill(
    template_name: &'static str,
    template: &str,
    slots: &[(&'static str, &str)],
) -> Result<String, PromptError> {
    for placeholder in PLACEHOLDERS {
        let found = template.matches(placeholder).count();
        match slots.iter().find(|(name, _)| *name == placeholder) {
            Some(_) if found != 1 => {
                return Err(PromptError::PlaceholderCount {
                    template: template_name,
                    placeholder,
                    found,
                });
            }
            None if found != 0 => {
                return Err(PromptError::PlaceholderNotAllowed {
                    template: template_name,
                    placeholder,
                });
            }
            _ => {}
        }
    }
    // Single left-to-right pass so substituted values are never rescanned;
    // placeholder-shaped text inside a question or document stays verbatim.
    let mut text = String::with_capacity(template.len() + 1024);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let candidate = &rest[open..];
        match slots.iter().find(|(name, _)| candidate.starts_with(name)) {
            Some((name, value)) => {
                text.push_str(value);
                rest = &candidate[name.len()..];
            }
            None => {
                text.push('{');
                rest = &candidate[1..];
            }
        }
    }
    text.push_str(rest);
    Ok(text)
}

/// Render one synthesis prompt for the given regime.
///
/// Ground-truth regimes show only the supporting documents under their
/// original indices plus the gold answer; the no-ground-truth regime shows
/// the full document set and never the answer; the no-document regime shows
/// the question and answer only.
pub fn render_synthesis_prompt(
    templates: &TemplateSet,
    variant: PromptVariant,
    sample: &Sample,
) -> Result<RenderedPrompt, PromptError> {
    let key = TemplateKey::for_variant(variant);
    let instruction = instruction_for(variant.is_coc());

    let doc_numbering: Vec<usize> = match variant {
        PromptVariant::CocGtDoc | PromptVariant::CotGtDoc => {
            sample.supporting_indices.iter().copied().collect()
        }
        PromptVariant::CocDoc => (1..=sample.documents.len()).collect(),
        PromptVariant::CotGtNodoc => Vec::new(),
    };
    let numbered: Vec<(usize, &Document)> = doc_numbering
        .iter()
        .map(|&k| (k, &sample.documents[k - 1]))
        .collect();
    let documents = format_documents(&numbered);

    let mut slots: Vec<(&'static str, &str)> = vec![
        ("{question}", sample.question.as_str()),
        ("{instruction}", instruction.as_str()),
    ];
    if variant != PromptVariant::CotGtNodoc {
        slots.push(("{documents}", documents.as_str()));
    }
    if variant.includes_gold() {
        slots.push(("{answer}", sample.answer.as_str()));
    }

    let text = fill(key.file_name(), templates.get(key), &slots)?;
    Ok(RenderedPrompt {
        text,
        kind: PromptKind::Synthesis(variant),
        sample_id: sample.id.clone(),
        doc_numbering,
    })
}

/// Render one inference prompt over the full document list, numbered 1..=n.
/// The caller attaches the sample id for bookkeeping.
pub fn render_inference_prompt(
    templates: &TemplateSet,
    style: InferenceStyle,
    question: &str,
    documents: &[Document],
) -> Result<RenderedPrompt, PromptError> {
    if documents.is_empty() {
        return Err(PromptError::EmptyDocuments);
    }
    let key = TemplateKey::for_style(style);
    let instruction = instruction_for(style == InferenceStyle::Coc);
    let doc_numbering: Vec<usize> = (1..=documents.len()).collect();
    let numbered: Vec<(usize, &Document)> = documents
        .iter()
        .enumerate()
        .map(|(i, d)| (i + 1, d))
        .collect();
    let docs_text = format_documents(&numbered);

    let slots: Vec<(&'static str, &str)> = vec![
        ("{question}", question),
        ("{documents}", docs_text.as_str()),
        ("{instruction}", instruction.as_str()),
    ];
    let text = fill(key.file_name(), templates.get(key), &slots)?;
    Ok(RenderedPrompt {
        text,
        kind: PromptKind::Inference(style),
        sample_id: String::new(),
        doc_numbering,
    })
}
