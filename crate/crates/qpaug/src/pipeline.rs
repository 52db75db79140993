//! End-to-end question answering flows.
//!
//! Six modes share one budget of `k_total` context passages:
//!
//! - `none`: closed-book answer, no context.
//! - `cot`: closed-book with an intermediate reasoning step.
//! - `rag`: retrieve `k_total` passages for the raw question.
//! - `qaug_only`: augment the question, retrieve `k_total` with the
//!   augmented query, answer the original question.
//! - `pgen_only`: retrieve `k_total - 1` for the raw question and ask
//!   the model to self-generate the final context passage.
//! - `qpaug`: both. Augment, retrieve `k_total - 1` with the augmented
//!   query, self-generate from the augmented question, answer.
//!
//! Self-generation is guarded: the model may answer `[NONE]` instead of
//! a passage, in which case prediction falls back to the retrieved-only
//! prompt over the same `k_total - 1` hits. Nothing is re-retrieved, so
//! the passage budget is never exceeded.
//!
//! Every question yields exactly one output record, errors included: a
//! failed example carries an error status and whatever partial fields
//! were produced, never a silent drop.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Passage, PassageStore, QAExample};
use crate::embed::{EmbedError, EmbeddingProvider};
use crate::llm::{LlmClient, LlmError, LlmRequest};
use crate::prompts::{PromptError, Prompts, COT_ANSWER_LEAD};
use crate::vindex::{ScoredHit, VectorIndex, VindexError};

pub const NONE_SENTINEL: &str = "[NONE]";
pub const DONE_SENTINEL: &str = "[DONE]";

/// How far into the generated text a `[NONE]` still counts as refusal.
const NONE_SCAN_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    None,
    Cot,
    Rag,
    QaugOnly,
    PgenOnly,
    Qpaug,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 6] = [
        PipelineMode::None,
        PipelineMode::Cot,
        PipelineMode::Rag,
        PipelineMode::QaugOnly,
        PipelineMode::PgenOnly,
        PipelineMode::Qpaug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::None => "none",
            PipelineMode::Cot => "cot",
            PipelineMode::Rag => "rag",
            PipelineMode::QaugOnly => "qaug_only",
            PipelineMode::PgenOnly => "pgen_only",
            PipelineMode::Qpaug => "qpaug",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        !matches!(self, PipelineMode::None | PipelineMode::Cot)
    }

    pub fn augments_question(self) -> bool {
        matches!(self, PipelineMode::QaugOnly | PipelineMode::Qpaug)
    }

    pub fn generates_passage(self) -> bool {
        matches!(self, PipelineMode::PgenOnly | PipelineMode::Qpaug)
    }

    /// Passages fetched from the index; generation fills the budget gap.
    pub fn retrieve_count(self, k_total: usize) -> usize {
        match self {
            PipelineMode::None | PipelineMode::Cot => 0,
            PipelineMode::Rag | PipelineMode::QaugOnly => k_total,
            PipelineMode::PgenOnly | PipelineMode::Qpaug => k_total.saturating_sub(1),
        }
    }

    /// Model consultations a successful example makes in this mode.
    pub fn llm_calls(self) -> usize {
        match self {
            PipelineMode::None | PipelineMode::Rag => 1,
            PipelineMode::Cot | PipelineMode::QaugOnly | PipelineMode::PgenOnly => 2,
            PipelineMode::Qpaug => 3,
        }
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown mode `{s}`, expected one of: {}",
                    PipelineMode::ALL.map(|m| m.as_str()).join(", ")
                )
            })
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of the passage self-generation step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratedPassage {
    Text(String),
    /// The model declined to write a passage.
    Absent,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("mode `{mode}` requires k_total >= {min}, got {got}")]
    BadK { mode: PipelineMode, min: usize, got: usize },
    #[error("mode `{0}` requires an embedder and an index")]
    MissingRetrievalDeps(PipelineMode),
    #[error("embedder dim {embedder} does not match index dim {index}")]
    EmbedderIndexDimMismatch { embedder: usize, index: usize },
    #[error("retrieved passage `{0}` is not in the passage store")]
    MissingPassage(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] VindexError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("run file line {line}: {message}")]
    BadRunFile { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a run needs. Retrieval modes require `embedder` and
/// `index`; closed-book modes run with both `None` and an empty store.
pub struct PipelineDeps {
    pub prompts: Prompts,
    pub llm: Arc<LlmClient>,
    pub embedder: Option<Arc<dyn EmbeddingProvider>>,
    pub index: Option<Arc<VectorIndex>>,
    pub store: Arc<PassageStore>,
    pub model: String,
    /// Token cap for augmentation, reasoning, and passage generation.
    pub gen_max_tokens: u32,
    /// Token cap for final short answers.
    pub answer_max_tokens: u32,
    /// Worker threads for `run_dataset`.
    pub max_parallel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "message")]
pub enum RecordStatus {
    Ok,
    Error(String),
}

/// One question's full trace: what was asked, what context was used,
/// and what the model answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub example_id: String,
    pub question: String,
    pub mode: PipelineMode,
    /// Composed augmented query, present when the mode augments.
    pub augmented_question: Option<String>,
    /// Self-generated passage text, present when one was produced.
    pub generated_passage: Option<String>,
    /// True when the generation step declined with the refusal marker.
    pub generated_absent: bool,
    pub hits: Vec<ScoredHit>,
    pub prediction: String,
    /// Completions actually performed for this example.
    pub llm_calls: usize,
    #[serde(flatten)]
    pub status: RecordStatus,
}

/// First line of a run file: enough provenance to tell two runs apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: PipelineMode,
    pub k_total: usize,
    pub model: String,
    pub backend: String,
    pub embedder_dim: Option<usize>,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RunLine {
    Meta(RunMeta),
    Record(PipelineRecord),
}

/// Counters for one `run_dataset` invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub total: usize,
    pub ok: usize,
    pub errors: usize,
    pub generated_absent: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub wall_ms: u128,
}

/// Splits generator output into a passage or a refusal.
///
/// Refusal: the trimmed text equals `[NONE]` case-insensitively, or a
/// case-insensitive `[NONE]` begins within the first 16 bytes. Otherwise
/// the text is cut before the first `[DONE]` and trimmed; an empty
/// remainder also counts as a refusal. The returned text therefore never
/// contains `[DONE]`.
pub fn parse_generated(raw: &str) -> GeneratedPassage {
    let trimmed = raw.trim();
    let lower = trimmed.to_lowercase();
    match lower.find("[none]") {
        Some(i) if i < NONE_SCAN_BYTES => return GeneratedPassage::Absent,
        _ => {}
    }
    let body = match trimmed.find(DONE_SENTINEL) {
        Some(i) => trimmed[..i].trim(),
        None => trimmed,
    };
    if body.is_empty() {
        GeneratedPassage::Absent
    } else {
        GeneratedPassage::Text(body.to_string())
    }
}

/// Appends the augmentation under the original question. An empty
/// augmentation leaves the question unchanged.
pub fn compose_augmented(question: &str, augmentation: &str) -> String {
    if augmentation.is_empty() {
        question.to_string()
    } else {
        format!("{question}\n{augmentation}")
    }
}

/// Checks mode, budget, and dependency consistency before any work.
pub fn validate_config(
    deps: &PipelineDeps,
    mode: PipelineMode,
    k_total: usize,
) -> Result<(), PipelineError> {
    if !mode.uses_retrieval() {
        return Ok(());
    }
    let min = if mode.generates_passage() { 2 } else { 1 };
    if k_total < min {
        return Err(PipelineError::BadK { mode, min, got: k_total });
    }
    match (&deps.embedder, &deps.index) {
        (Some(embedder), Some(index)) => {
            if embedder.dim() != index.dim() {
                return Err(PipelineError::EmbedderIndexDimMismatch {
                    embedder: embedder.dim(),
                    index: index.dim(),
                });
            }
            Ok(())
        }
        _ => Err(PipelineError::MissingRetrievalDeps(mode)),
    }
}

fn complete(
    deps: &PipelineDeps,
    rec: &mut PipelineRecord,
    prompt: String,
    max_tokens: u32,
    stop: Vec<String>,
) -> Result<String, PipelineError> {
    let response = deps.llm.complete(&LlmRequest {
        model: deps.model.clone(),
        prompt,
        max_tokens,
        stop,
    })?;
    rec.llm_calls += 1;
    Ok(response)
}

fn retrieve(
    deps: &PipelineDeps,
    query: &str,
    k: usize,
) -> Result<Vec<ScoredHit>, PipelineError> {
    let embedder = deps.embedder.as_ref().expect("validated");
    let index = deps.index.as_ref().expect("validated");
    let vector = embedder.embed_one(query)?;
    Ok(index.top_k(&vector, k)?)
}

fn lookup<'a>(
    store: &'a PassageStore,
    hits: &[ScoredHit],
) -> Result<Vec<&'a Passage>, PipelineError> {
    hits.iter()
        .map(|h| {
            store
                .get(&h.passage_id)
                .ok_or_else(|| PipelineError::MissingPassage(h.passage_id.clone()))
        })
        .collect()
}

fn run_into(
    deps: &PipelineDeps,
    mode: PipelineMode,
    k_total: usize,
    example: &QAExample,
    rec: &mut PipelineRecord,
) -> Result<(), PipelineError> {
    validate_config(deps, mode, k_total)?;
    let q = &example.question;
    let answer = |deps: &PipelineDeps, rec: &mut PipelineRecord, prompt: String| {
        complete(deps, rec, prompt, deps.answer_max_tokens, vec![])
            .map(|r| r.trim().to_string())
    };
    match mode {
        PipelineMode::None => {
            let prompt = deps.prompts.render_pred_no_retrieval(q);
            rec.prediction = answer(deps, rec, prompt)?;
        }
        PipelineMode::Cot => {
            let lead = deps.prompts.render_qaug(q);
            let reasoning = complete(deps, rec, lead.clone(), deps.gen_max_tokens, vec![])?;
            let prompt = format!("{lead}{}{COT_ANSWER_LEAD}", reasoning.trim());
            rec.prediction = answer(deps, rec, prompt)?;
        }
        PipelineMode::Rag => {
            rec.hits = retrieve(deps, q, k_total)?;
            let passages = lookup(&deps.store, &rec.hits)?;
            let prompt = deps.prompts.render_pred_rag(q, &passages);
            rec.prediction = answer(deps, rec, prompt)?;
        }
        PipelineMode::QaugOnly => {
            let composed = augment(deps, rec, q)?;
            rec.hits = retrieve(deps, &composed, k_total)?;
            let passages = lookup(&deps.store, &rec.hits)?;
            // prediction always sees the original question
            let prompt = deps.prompts.render_pred_rag(q, &passages);
            rec.prediction = answer(deps, rec, prompt)?;
        }
        PipelineMode::PgenOnly => {
            rec.hits = retrieve(deps, q, k_total - 1)?;
            let generated = generate(deps, rec, q)?;
            let passages = lookup(&deps.store, &rec.hits)?;
            let prompt = match &generated {
                GeneratedPassage::Text(text) => {
                    deps.prompts.render_pred_qpaug(q, &passages, text)
                }
                GeneratedPassage::Absent => deps.prompts.render_pred_rag(q, &passages),
            };
            rec.prediction = answer(deps, rec, prompt)?;
        }
        PipelineMode::Qpaug => {
            let composed = augment(deps, rec, q)?;
            rec.hits = retrieve(deps, &composed, k_total - 1)?;
            let generated = generate(deps, rec, &composed)?;
            let passages = lookup(&deps.store, &rec.hits)?;
            let prompt = match &generated {
                GeneratedPassage::Text(text) => {
                    deps.prompts.render_pred_qpaug(q, &passages, text)
                }
                GeneratedPassage::Absent => deps.prompts.render_pred_rag(q, &passages),
            };
            rec.prediction = answer(deps, rec, prompt)?;
        }
    }
    Ok(())
}

/// Runs the augmentation completion and records the composed query.
fn augment(
    deps: &PipelineDeps,
    rec: &mut PipelineRecord,
    question: &str,
) -> Result<String, PipelineError> {
    let prompt = deps.prompts.render_qaug(question);
    let response = complete(deps, rec, prompt, deps.gen_max_tokens, vec![])?;
    let augmentation = response.trim();
    if augmentation.is_empty() {
        log::warn!("empty augmentation for question {:?}, using it unaugmented", question);
    }
    let composed = compose_augmented(question, augmentation);
    rec.augmented_question = Some(composed.clone());
    Ok(composed)
}

/// Runs the passage-generation completion and records the outcome.
fn generate(
    deps: &PipelineDeps,
    rec: &mut PipelineRecord,
    question: &str,
) -> Result<GeneratedPassage, PipelineError> {
    let prompt = deps.prompts.render_pgen(question);
    let response = complete(
        deps,
        rec,
        prompt,
        deps.gen_max_tokens,
        vec![DONE_SENTINEL.to_string()],
    )?;
    let generated = parse_generated(&response);
    match &generated {
        GeneratedPassage::Text(text) => rec.generated_passage = Some(text.clone()),
        GeneratedPassage::Absent => rec.generated_absent = true,
    }
    Ok(generated)
}

/// Runs one example, converting any failure into an error-status record
/// that keeps the fields produced before the failure.
pub fn run_example(
    deps: &PipelineDeps,
    mode: PipelineMode,
    k_total: usize,
    example: &QAExample,
) -> PipelineRecord {
    let mut rec = PipelineRecord {
        example_id: example.id.clone(),
        question: example.question.clone(),
        mode,
        augmented_question: None,
        generated_passage: None,
        generated_absent: false,
        hits: Vec::new(),
        prediction: String::new(),
        llm_calls: 0,
        status: RecordStatus::Ok,
    };
    if let Err(e) = run_into(deps, mode, k_total, example, &mut rec) {
        rec.status = RecordStatus::Error(e.to_string());
    }
    rec
}

fn config_hash(deps: &PipelineDeps, mode: PipelineMode, k_total: usize) -> String {
    #[derive(Serialize)]
    struct Fingerprint<'a> {
        mode: PipelineMode,
        k_total: usize,
        model: &'a str,
        backend: &'a str,
        gen_max_tokens: u32,
        answer_max_tokens: u32,
        embedder_dim: Option<usize>,
        template_hashes: &'a BTreeMap<String, String>,
    }
    let fp = Fingerprint {
        mode,
        k_total,
        model: &deps.model,
        backend: deps.llm.backend_name(),
        gen_max_tokens: deps.gen_max_tokens,
        answer_max_tokens: deps.answer_max_tokens,
        embedder_dim: deps.embedder.as_ref().map(|e| e.dim()),
        template_hashes: deps.prompts.hashes(),
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&fp).expect("serializable")))
}

pub fn run_meta(deps: &PipelineDeps, mode: PipelineMode, k_total: usize) -> RunMeta {
    RunMeta {
        mode,
        k_total,
        model: deps.model.clone(),
        backend: deps.llm.backend_name().to_string(),
        embedder_dim: deps.embedder.as_ref().map(|e| e.dim()),
        config_hash: config_hash(deps, mode, k_total),
        template_hashes: deps.prompts.hashes().clone(),
    }
}

/// Runs every example and streams JSON Lines to `out`: one meta line,
/// then one record per example in input order. Examples are processed
/// by `deps.max_parallel` workers; output order is restored by a
/// reorder buffer, so the file is byte-stable for a fixed configuration
/// regardless of scheduling.
pub fn run_dataset(
    deps: &PipelineDeps,
    mode: PipelineMode,
    k_total: usize,
    examples: &[QAExample],
    out: &mut dyn Write,
) -> Result<RunSummary, PipelineError> {
    validate_config(deps, mode, k_total)?;
    let started = Instant::now();
    let calls_before = deps.llm.backend_calls();
    let hits_before = deps.llm.cache_hits();

    let meta = RunLine::Meta(run_meta(deps, mode, k_total));
    writeln!(out, "{}", serde_json::to_string(&meta)?)?;

    let mut summary = RunSummary {
        total: examples.len(),
        ok: 0,
        errors: 0,
        generated_absent: 0,
        backend_calls: 0,
        cache_hits: 0,
        wall_ms: 0,
    };

    let next = AtomicUsize::new(0);
    let workers = deps.max_parallel.clamp(1, examples.len().max(1));
    let (tx, rx) = mpsc::channel::<(usize, PipelineRecord)>();
    let mut write_result: Result<(), PipelineError> = Ok(());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let deps = &deps;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= examples.len() {
                    break;
                }
                let rec = run_example(deps, mode, k_total, &examples[i]);
                if tx.send((i, rec)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, PipelineRecord> = BTreeMap::new();
        let mut next_write = 0usize;
        for (i, rec) in rx {
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&next_write) {
                match rec.status {
                    RecordStatus::Ok => summary.ok += 1,
                    RecordStatus::Error(_) => summary.errors += 1,
                }
                if rec.generated_absent {
                    summary.generated_absent += 1;
                }
                let line = RunLine::Record(rec);
                if let Err(e) = serde_json::to_string(&line)
                    .map_err(PipelineError::from)
                    .and_then(|s| writeln!(out, "{s}").map_err(PipelineError::from))
                {
                    write_result = Err(e);
                    return;
                }
                next_write += 1;
            }
        }
    });
    write_result?;

    summary.backend_calls = deps.llm.backend_calls() - calls_before;
    summary.cache_hits = deps.llm.cache_hits() - hits_before;
    summary.wall_ms = started.elapsed().as_millis();
    Ok(summary)
}

/// Reads a run file back: the leading meta line, then records in file
/// order.
pub fn read_run_file(
    path: &std::path::Path,
) -> Result<(RunMeta, Vec<PipelineRecord>), PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut meta: Option<RunMeta> = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RunLine =
            serde_json::from_str(line).map_err(|e| PipelineError::BadRunFile {
                line: i + 1,
                message: e.to_string(),
            })?;
        match parsed {
            RunLine::Meta(m) => {
                if i != 0 {
                    return Err(PipelineError::BadRunFile {
                        line: i + 1,
                        message: "meta line after the first line".into(),
                    });
                }
                meta = Some(m);
            }
            RunLine::Record(r) => {
                if meta.is_none() {
                    return Err(PipelineError::BadRunFile {
                        line: i + 1,
                        message: "record before meta line".into(),
                    });
                }
                records.push(r);
            }
        }
    }
    match meta {
        Some(m) => Ok((m, records)),
        None => Err(PipelineError::BadRunFile {
            line: 1,
            message: "missing meta line".into(),
        }),
    }
}
