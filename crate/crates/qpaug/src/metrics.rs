//! Answer-span scoring: normalization, token F1, Rouge-L, Answer Recall@K.
//!
//! Predictions and gold answers are normalized before comparison:
//! lowercase, strip ASCII punctuation, drop standalone articles
//! (`a`, `an`, `the`), collapse whitespace. Both metrics are F-measures
//! over normalized whitespace tokens: F1 on multiset overlap, Rouge-L on
//! the longest common subsequence. Multi-gold examples score as the max
//! over the gold set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PassageStore;
use crate::vindex::ScoredHit;

/// Per-question scores, each the max over the gold answer set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub f1: f64,
    pub rouge_l: f64,
    /// Gold answer achieving the max F1 (first in gold order on ties).
    pub best_gold: String,
}

/// One recall observation: did the top-k passages contain a gold answer?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub example_id: String,
    pub k: usize,
    pub hit: bool,
}

/// Corpus-level means, as percentages. `None` when no scores were given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean_f1: Option<f64>,
    pub mean_rouge_l: Option<f64>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("hit references unknown passage id `{0}`")]
    UnknownPassageId(String),
    #[error("k must be >= 1")]
    InvalidK,
}

fn is_ascii_punct(c: char) -> bool {
    matches!(c, '!'..='/' | ':'..='@' | '['..='`' | '{'..='~')
}

/// Normalizes an answer string: lowercase, remove ASCII punctuation,
/// remove standalone articles, collapse whitespace runs, trim.
///
/// Idempotent: applying it twice equals applying it once.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !is_ascii_punct(*c)).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split_whitespace().map(str::to_string).collect()
}

fn f_measure(overlap: f64, pred_len: usize, gold_len: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / pred_len as f64;
    let recall = overlap / gold_len as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1 over normalized multisets.
///
/// Empty-vs-empty scores 1, empty-vs-nonempty 0.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = tokens(prediction);
    let gold = tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &pred {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for t in &gold {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap as f64, pred.len(), gold.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] =
                if ai == bj { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Rouge-L: F-measure over the token-level longest common subsequence.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let pred = tokens(prediction);
    let gold = tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let lcs = lcs_len(&pred, &gold) as f64;
    f_measure(lcs, pred.len(), gold.len())
}

/// Scores a prediction against all gold answers, keeping the max of each
/// metric. `best_gold` is the F1 argmax, first in gold order on ties.
pub fn score_example(example_id: &str, prediction: &str, golds: &[String]) -> ExampleScore {
    assert!(!golds.is_empty(), "golds must be non-empty");
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_rouge = f64::NEG_INFINITY;
    let mut best_gold = &golds[0];
    for gold in golds {
        let f1 = token_f1(prediction, gold);
        if f1 > best_f1 {
            best_f1 = f1;
            best_gold = gold;
        }
        best_rouge = best_rouge.max(rouge_l(prediction, gold));
    }
    ExampleScore {
        example_id: example_id.to_string(),
        f1: best_f1,
        rouge_l: best_rouge,
        best_gold: best_gold.clone(),
    }
}

/// True iff any of the first `min(k, |hits|)` passages' normalized body
/// text contains a normalized gold answer as a contiguous substring.
/// Titles are excluded. A gold that normalizes to the empty string never
/// matches.
pub fn answer_recall_at_k(
    hits: &[ScoredHit],
    passages: &PassageStore,
    golds: &[String],
    k: usize,
) -> Result<bool, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let norm_golds: Vec<String> =
        golds.iter().map(|g| normalize_answer(g)).filter(|g| !g.is_empty()).collect();
    for hit in hits.iter().take(k) {
        let passage = passages
            .get(&hit.passage_id)
            .ok_or_else(|| MetricsError::UnknownPassageId(hit.passage_id.clone()))?;
        let text = normalize_answer(&passage.text);
        if norm_golds.iter().any(|g| text.contains(g.as_str())) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Arithmetic means of the per-example scores, as percentages.
pub fn aggregate(scores: &[ExampleScore]) -> Aggregate {
    if scores.is_empty() {
        return Aggregate { n: 0, mean_f1: None, mean_rouge_l: None };
    }
    let n = scores.len() as f64;
    let f1: f64 = scores.iter().map(|s| s.f1).sum::<f64>() / n;
    let rouge: f64 = scores.iter().map(|s| s.rouge_l).sum::<f64>() / n;
    Aggregate {
        n: scores.len(),
        mean_f1: Some(f1 * 100.0),
        mean_rouge_l: Some(rouge * 100.0),
    }
}
