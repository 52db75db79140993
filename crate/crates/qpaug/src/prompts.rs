//! Prompt templates and rendering.
//!
//! Five templates drive the pipeline: question augmentation, passage
//! self-generation, and three answer-prediction variants (closed-book,
//! retrieved context, retrieved plus generated context). Defaults are
//! compiled in; any of them can be overridden by a file in a template
//! directory. Rendered prompts are byte-stable for byte-stable inputs,
//! and every template is content-hashed so run outputs record exactly
//! which prompt text produced them.
//!
//! Substitution is single-pass: placeholder-like text inside a
//! substituted value is emitted literally, never expanded again.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Passage;

pub const QAUG_TEMPLATE: &str = "Question: {question}\nLet's think step-by-step.\n";

pub const PGEN_TEMPLATE: &str = "Your job is to act as a subject matter expert. You will write a good-quality passage that can answer the question based on your factual knowledge. Do not write a passage if you don't know accurate information about the question.\n\nNow, let's start. After you write, please write [DONE] to indicate you are done. Write [NONE] if you cannot write a factual passage.\nQuestion: {question}\nPassage:";

pub const PRED_NO_RETRIEVAL_TEMPLATE: &str =
    "Question: {question} Do not exceed 3 words.\n\nAnswer:";

pub const PRED_RAG_TEMPLATE: &str =
    "{passages}\n\nQuestion: {question} Do not exceed 3 words.\n\nAnswer:";

pub const PRED_QPAUG_TEMPLATE: &str =
    "{passages}\n\nYour knowledge: {generated}\n\nQuestion: {question} Do not exceed 3 words.\n\nAnswer:";

/// Chain-of-thought answer extraction: appended after the model's
/// reasoning to elicit a short final answer.
pub const COT_ANSWER_LEAD: &str = "\nTherefore, the answer is (Do not exceed 3 words):";

const QUESTION_SLOT: &str = "{question}";
const PASSAGES_SLOT: &str = "{passages}";
const GENERATED_SLOT: &str = "{generated}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Qaug,
    Pgen,
    PredNoRetrieval,
    PredRag,
    PredQpaug,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::Qaug,
        PromptKind::Pgen,
        PromptKind::PredNoRetrieval,
        PromptKind::PredRag,
        PromptKind::PredQpaug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Qaug => "qaug",
            PromptKind::Pgen => "pgen",
            PromptKind::PredNoRetrieval => "pred_no_retrieval",
            PromptKind::PredRag => "pred_rag",
            PromptKind::PredQpaug => "pred_qpaug",
        }
    }

    /// Override file name inside a template directory.
    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn default_template(self) -> &'static str {
        match self {
            PromptKind::Qaug => QAUG_TEMPLATE,
            PromptKind::Pgen => PGEN_TEMPLATE,
            PromptKind::PredNoRetrieval => PRED_NO_RETRIEVAL_TEMPLATE,
            PromptKind::PredRag => PRED_RAG_TEMPLATE,
            PromptKind::PredQpaug => PRED_QPAUG_TEMPLATE,
        }
    }

    fn required_slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::Qaug | PromptKind::Pgen | PromptKind::PredNoRetrieval => {
                &[QUESTION_SLOT]
            }
            PromptKind::PredRag => &[QUESTION_SLOT, PASSAGES_SLOT],
            PromptKind::PredQpaug => &[QUESTION_SLOT, PASSAGES_SLOT, GENERATED_SLOT],
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{kind}` is missing required placeholder `{placeholder}`")]
    MissingPlaceholder { kind: &'static str, placeholder: &'static str },
    #[error("failed to read template `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The template set in effect for a run, with a SHA-256 hex digest per
/// template keyed by kind name.
#[derive(Debug, Clone)]
pub struct Prompts {
    templates: BTreeMap<PromptKind, String>,
    hashes: BTreeMap<String, String>,
}

impl Default for Prompts {
    fn default() -> Self {
        let templates = PromptKind::ALL
            .iter()
            .map(|k| (*k, k.default_template().to_string()))
            .collect();
        Prompts::validated(templates).expect("built-in templates are valid")
    }
}

impl Prompts {
    fn validated(templates: BTreeMap<PromptKind, String>) -> Result<Self, PromptError> {
        for (kind, template) in &templates {
            for slot in kind.required_slots() {
                if !template.contains(slot) {
                    return Err(PromptError::MissingPlaceholder {
                        kind: kind.as_str(),
                        placeholder: slot,
                    });
                }
            }
        }
        let hashes = templates
            .iter()
            .map(|(k, t)| (k.as_str().to_string(), sha256_hex(t.as_bytes())))
            .collect();
        Ok(Prompts { templates, hashes })
    }

    /// Defaults, with any `<kind>.txt` file in `dir` taking precedence.
    /// File bytes are used verbatim; trailing newlines count.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            let template = match std::fs::read_to_string(&path) {
                Ok(text) => text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    kind.default_template().to_string()
                }
                Err(e) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        source: e,
                    })
                }
            };
            templates.insert(kind, template);
        }
        Prompts::validated(templates)
    }

    pub fn template(&self, kind: PromptKind) -> &str {
        &self.templates[&kind]
    }

    /// SHA-256 hex digests of the template bytes, keyed by kind name.
    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.hashes
    }

    pub fn render_qaug(&self, question: &str) -> String {
        fill(self.template(PromptKind::Qaug), &[(QUESTION_SLOT, question)])
    }

    pub fn render_pgen(&self, question: &str) -> String {
        fill(self.template(PromptKind::Pgen), &[(QUESTION_SLOT, question)])
    }

    pub fn render_pred_no_retrieval(&self, question: &str) -> String {
        fill(self.template(PromptKind::PredNoRetrieval), &[(QUESTION_SLOT, question)])
    }

    pub fn render_pred_rag(&self, question: &str, passages: &[&Passage]) -> String {
        fill(
            self.template(PromptKind::PredRag),
            &[(PASSAGES_SLOT, &passage_block(passages)), (QUESTION_SLOT, question)],
        )
    }

    pub fn render_pred_qpaug(
        &self,
        question: &str,
        passages: &[&Passage],
        generated: &str,
    ) -> String {
        fill(
            self.template(PromptKind::PredQpaug),
            &[
                (PASSAGES_SLOT, &passage_block(passages)),
                (GENERATED_SLOT, generated),
                (QUESTION_SLOT, question),
            ],
        )
    }
}

/// Formats retrieved passages for a prompt: `Title: {title}` then the
/// body for titled passages, the body alone otherwise, blocks separated
/// by a blank line.
pub fn passage_block(passages: &[&Passage]) -> String {
    passages
        .iter()
        .map(|p| {
            if p.title.is_empty() {
                p.text.clone()
            } else {
                format!("Title: {}\n{}", p.title, p.text)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Replaces each placeholder in one left-to-right pass over the
/// template. Substituted values are never rescanned, so a value that
/// happens to contain `{question}` stays literal.
fn fill(template: &str, subs: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = subs
            .iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|i| (i, *slot, *value)))
            .min_by_key(|(i, _, _)| *i);
        match next {
            Some((i, slot, value)) => {
                out.push_str(&rest[..i]);
                out.push_str(value);
                rest = &rest[i + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
