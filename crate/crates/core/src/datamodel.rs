//! Dataset records, JSON-lines ingestion and corpus statistics.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"id":"a","query":"q","documents":[{"title":"t","body":"d"}],"gold_answer":"50","relevance":[true]}
//! ```
//!
//! `title`, `gold_answer` and `relevance` are optional. Blank lines are ignored.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{field} empty at line {line}")]
    Empty { line: usize, field: &'static str },
    #[error("relevance has {labels} labels but {documents} documents at line {line}")]
    LabelMismatch {
        line: usize,
        labels: usize,
        documents: usize,
    },
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Number of maximal runs of non-whitespace characters (Unicode whitespace).
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawDocument", into = "RawDocument")]
pub struct Document {
    pub title: Option<String>,
    pub body: String,
    word_count: usize,
}

#[derive(Serialize, Deserialize)]
struct RawDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    body: String,
}

impl From<RawDocument> for Document {
    fn from(raw: RawDocument) -> Self {
        Document::with_title(raw.title, raw.body)
    }
}

impl From<Document> for RawDocument {
    fn from(doc: Document) -> Self {
        RawDocument {
            title: doc.title,
            body: doc.body,
        }
    }
}

impl Document {
    pub fn new(body: impl Into<String>) -> Self {
        Self::with_title(None, body)
    }

    pub fn with_title(title: Option<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let word_count = word_count(&body);
        Document {
            title,
            body,
            word_count,
        }
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }
}

/// One training or evaluation unit: a query with its pre-retrieved documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagSample {
    pub id: String,
    pub query: String,
    pub documents: Vec<Document>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    /// `true` marks a relevant document, aligned with `documents`.
    #[serde(
        rename = "relevance",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub relevance_labels: Option<Vec<bool>>,
}

impl RagSample {
    pub fn new(id: impl Into<String>, query: impl Into<String>, documents: Vec<Document>) -> Self {
        RagSample {
            id: id.into(),
            query: query.into(),
            documents,
            gold_answer: None,
            relevance_labels: None,
        }
    }

    /// Checks the per-record invariants. `line` is only used for error reporting.
    pub fn validate(&self, line: usize) -> Result<(), DataError> {
        if self.id.is_empty() {
            return Err(DataError::Empty { line, field: "id" });
        }
        if self.documents.is_empty() {
            return Err(DataError::Empty {
                line,
                field: "documents",
            });
        }
        if let Some(labels) = &self.relevance_labels {
            if labels.len() != self.documents.len() {
                return Err(DataError::LabelMismatch {
                    line,
                    labels: labels.len(),
                    documents: self.documents.len(),
                });
            }
        }
        Ok(())
    }
}

/// Parses dataset records from a reader. Line numbers in errors are 1-based.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<RagSample>, DataError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RagSample = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        sample.validate(line_no)?;
        if !seen.insert(sample.id.clone()) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<RagSample>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(BufReader::new(file))
}

pub fn write_dataset(mut writer: impl Write, samples: &[RagSample]) -> std::io::Result<()> {
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[RagSample]) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_dataset(BufWriter::new(file), samples).map_err(io_err)
}

/// `(avg, max, min)` of a per-sample quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub avg: f64,
    pub max: f64,
    pub min: f64,
}

impl Spread {
    /// Integer sums keep the mean independent of sample order.
    fn of(values: impl IntoIterator<Item = usize>) -> Spread {
        let mut n = 0usize;
        let mut sum = 0usize;
        let mut max = 0usize;
        let mut min = usize::MAX;
        for v in values {
            n += 1;
            sum += v;
            max = max.max(v);
            min = min.min(v);
        }
        Spread {
            avg: sum as f64 / n as f64,
            max: max as f64,
            min: min as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub avg_query_len: f64,
    pub docs_per_query: Spread,
    pub total_doc_len: Spread,
    /// Present only when every sample carries relevance labels.
    pub irrelevant_doc_ratio: Option<f64>,
}

pub fn dataset_stats(samples: &[RagSample]) -> Result<DatasetStats, DataError> {
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = samples.len();
    let query_words: usize = samples.iter().map(|s| word_count(&s.query)).sum();
    let docs_per_query = Spread::of(samples.iter().map(|s| s.documents.len()));
    let total_doc_len = Spread::of(
        samples
            .iter()
            .map(|s| s.documents.iter().map(Document::word_count).sum::<usize>()),
    );

    let irrelevant_doc_ratio = if samples.iter().all(|s| s.relevance_labels.is_some()) {
        let (irrelevant, total) = samples
            .iter()
            .filter_map(|s| s.relevance_labels.as_ref())
            .fold((0usize, 0usize), |(irr, tot), labels| {
                (irr + labels.iter().filter(|relevant| !**relevant).count(), tot + labels.len())
            });
        Some(irrelevant as f64 / total as f64)
    } else {
        None
    };

    Ok(DatasetStats {
        n_samples: n,
        avg_query_len: query_words as f64 / n as f64,
        docs_per_query,
        total_doc_len,
        irrelevant_doc_ratio,
    })
}
