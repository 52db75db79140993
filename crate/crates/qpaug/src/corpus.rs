//! Passage corpora and QA benchmark datasets.
//!
//! A [`PassageStore`] is the retrievable knowledge source: an ordered,
//! id-indexed collection of passages loaded from the DPR-style TSV dump
//! or from JSONL. Benchmark questions load as [`QAExample`]s from JSONL.
//! Text is stored byte-for-byte as found in the file; normalization is
//! the metrics module's job.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One retrievable text unit of the knowledge source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// A benchmark question with its gold answer set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

/// Ordered, immutable passage collection with an id index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageStore {
    passages: Vec<Passage>,
    index_by_id: HashMap<String, usize>,
}

/// Input format for [`load_passages`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected 3 tab-separated fields, found {found}")]
    MalformedRow { line: usize, found: usize },
    #[error("line {line}: malformed JSON record: {message}")]
    MalformedJson { line: usize, message: String },
    #[error("line {line}: field `{field}` is empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: duplicate passage id `{id}`")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: `answers` must contain at least one non-empty answer")]
    EmptyAnswers { line: usize },
    #[error("unexpected TSV header `{found}` (expected `id\\ttext\\ttitle`)")]
    BadHeader { found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const TSV_HEADER: &str = "id\ttext\ttitle";

impl PassageStore {
    /// Builds a store from passages in order, validating invariants.
    ///
    /// Error line numbers refer to 1-based positions in the input slice.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut index_by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            let line = i + 1;
            if p.id.is_empty() {
                return Err(CorpusError::EmptyField { line, field: "id" });
            }
            if p.text.is_empty() {
                return Err(CorpusError::EmptyField { line, field: "text" });
            }
            if index_by_id.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { id: p.id.clone(), line });
            }
        }
        Ok(Self { passages, index_by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Looks up a passage by id.
    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.index_by_id.get(id).map(|&i| &self.passages[i])
    }

    /// Position of an id in file order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index_by_id.get(id).copied()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    /// Writes the store as JSONL, one passage object per line.
    ///
    /// Reloading the written file with [`load_passages`] yields an equal
    /// store, field for field.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        for p in &self.passages {
            serde_json::to_writer(&mut out, p).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

impl<'a> IntoIterator for &'a PassageStore {
    type Item = &'a Passage;
    type IntoIter = std::slice::Iter<'a, Passage>;

    fn into_iter(self) -> Self::IntoIter {
        self.passages.iter()
    }
}

/// Loads a passage corpus, preserving file order.
///
/// TSV input must carry the header `id\ttext\ttitle`; fields are raw tab
/// separation with no quoting, so embedded quote characters stay literal.
/// JSONL input takes one `{"id","title","text"}` object per line.
pub fn load_passages(path: &Path, format: CorpusFormat) -> Result<PassageStore, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut passages = Vec::new();
    let mut index_by_id: HashMap<String, usize> = HashMap::new();

    let mut push = |p: Passage, line: usize| -> Result<(), CorpusError> {
        if p.id.is_empty() {
            return Err(CorpusError::EmptyField { line, field: "id" });
        }
        if p.text.is_empty() {
            return Err(CorpusError::EmptyField { line, field: "text" });
        }
        if index_by_id.insert(p.id.clone(), passages.len()).is_some() {
            return Err(CorpusError::DuplicateId { id: p.id.clone(), line });
        }
        passages.push(p);
        Ok(())
    };

    match format {
        CorpusFormat::Tsv => {
            let mut lines = reader.lines();
            let header = lines.next().transpose()?.unwrap_or_default();
            if header != TSV_HEADER {
                return Err(CorpusError::BadHeader { found: header });
            }
            for (i, line) in lines.enumerate() {
                let line_no = i + 2;
                let line = line?;
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 3 {
                    return Err(CorpusError::MalformedRow { line: line_no, found: fields.len() });
                }
                push(
                    Passage {
                        id: fields[0].to_string(),
                        text: fields[1].to_string(),
                        title: fields[2].to_string(),
                    },
                    line_no,
                )?;
            }
        }
        CorpusFormat::Jsonl => {
            for (i, line) in reader.lines().enumerate() {
                let line_no = i + 1;
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let p: Passage = serde_json::from_str(&line).map_err(|e| {
                    CorpusError::MalformedJson { line: line_no, message: e.to_string() }
                })?;
                push(p, line_no)?;
            }
        }
    }

    Ok(PassageStore { passages, index_by_id })
}

#[derive(Deserialize)]
struct DatasetRow {
    id: Option<String>,
    question: Option<String>,
    answers: Option<Vec<String>>,
}

/// Loads a JSONL QA dataset, preserving file order.
///
/// Records without an `id` get one synthesized from the 1-based line
/// number (`q{line}`).
pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row: DatasetRow = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedJson { line: line_no, message: e.to_string() })?;
        let question = match row.question {
            Some(q) if !q.is_empty() => q,
            _ => return Err(CorpusError::MissingField { line: line_no, field: "question" }),
        };
        let answers = match row.answers {
            Some(a) => a,
            None => return Err(CorpusError::MissingField { line: line_no, field: "answers" }),
        };
        if answers.is_empty() || answers.iter().any(String::is_empty) {
            return Err(CorpusError::EmptyAnswers { line: line_no });
        }
        let id = row.id.filter(|s| !s.is_empty()).unwrap_or_else(|| format!("q{line_no}"));
        examples.push(QAExample { id, question, answers });
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn tsv_row_maps_fields() {
        let f = write_temp("id\ttext\ttitle\n7\tHercules was a hero.\tHercules\n");
        let store = load_passages(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(
            store.get("7").unwrap(),
            &Passage {
                id: "7".into(),
                title: "Hercules".into(),
                text: "Hercules was a hero.".into(),
            }
        );
    }

    #[test]
    fn tsv_empty_after_header() {
        let f = write_temp("id\ttext\ttitle\n");
        let store = load_passages(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(store.len(), 0);
    }

    #[test]
    fn tsv_wrong_column_count() {
        let f = write_temp("id\ttext\ttitle\n7\tonly two fields\n");
        let err = load_passages(f.path(), CorpusFormat::Tsv).unwrap_err();
        match err {
            CorpusError::MalformedRow { line, found } => {
                assert_eq!(line, 2);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn tsv_bad_header() {
        let f = write_temp("id\ttitle\ttext\n");
        assert!(matches!(
            load_passages(f.path(), CorpusFormat::Tsv),
            Err(CorpusError::BadHeader { .. })
        ));
    }

    #[test]
    fn tsv_quotes_are_literal() {
        let f = write_temp("id\ttext\ttitle\n1\the said \"\"hi\"\" once\tT\n");
        let store = load_passages(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(store.get("1").unwrap().text, "he said \"\"hi\"\" once");
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_temp("id\ttext\ttitle\na\tx\t\na\ty\t\n");
        let err = load_passages(f.path(), CorpusFormat::Tsv).unwrap_err();
        match err {
            CorpusError::DuplicateId { id, line } => {
                assert_eq!(id, "a");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn jsonl_load_and_roundtrip() {
        let f = write_temp(
            "{\"id\":\"1\",\"title\":\"A\",\"text\":\"alpha\"}\n{\"id\":\"2\",\"title\":\"\",\"text\":\"beta\"}\n",
        );
        let store = load_passages(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(store.len(), 2);

        let out = tempfile::NamedTempFile::new().unwrap();
        store.save_jsonl(out.path()).unwrap();
        let reloaded = load_passages(out.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(store, reloaded);
    }

    #[test]
    fn load_is_deterministic() {
        let f = write_temp("id\ttext\ttitle\n1\tx\tA\n2\ty\tB\n");
        let a = load_passages(f.path(), CorpusFormat::Tsv).unwrap();
        let b = load_passages(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_single_gold_answer() {
        let f = write_temp(
            "{\"question\":\"who was the buccaneers qb when they won the superbowl\",\"answers\":[\"Brad Johnson\"]}\n",
        );
        let examples = load_dataset(f.path()).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].id, "q1");
        assert_eq!(examples[0].answers, vec!["Brad Johnson".to_string()]);
    }

    #[test]
    fn dataset_empty_answers_rejected() {
        let f = write_temp("{\"question\":\"q\",\"answers\":[]}\n");
        assert!(matches!(load_dataset(f.path()), Err(CorpusError::EmptyAnswers { line: 1 })));
    }

    #[test]
    fn dataset_blank_answer_rejected() {
        let f = write_temp("{\"question\":\"q\",\"answers\":[\"ok\",\"\"]}\n");
        assert!(matches!(load_dataset(f.path()), Err(CorpusError::EmptyAnswers { line: 1 })));
    }

    #[test]
    fn dataset_missing_question() {
        let f = write_temp("{\"answers\":[\"a\"]}\n");
        assert!(matches!(
            load_dataset(f.path()),
            Err(CorpusError::MissingField { line: 1, field: "question" })
        ));
    }

    #[test]
    fn dataset_keeps_explicit_id_and_order() {
        let f = write_temp(
            "{\"id\":\"nq-7\",\"question\":\"a\",\"answers\":[\"x\"]}\n{\"question\":\"b\",\"answers\":[\"y\"]}\n",
        );
        let examples = load_dataset(f.path()).unwrap();
        assert_eq!(examples[0].id, "nq-7");
        assert_eq!(examples[1].id, "q2");
    }

    #[test]
    fn from_passages_validates() {
        let err = PassageStore::from_passages(vec![Passage {
            id: "1".into(),
            title: String::new(),
            text: String::new(),
        }])
        .unwrap_err();
        assert!(matches!(err, CorpusError::EmptyField { field: "text", .. }));
    }
}
