//! Benchmark samples, stored one JSON record per line.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::EntityId;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    /// Entity id or literal token, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl Answer {
    pub fn labeled(label: impl Into<String>) -> Self {
        Answer {
            id: None,
            label: label.into(),
            aliases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSample {
    pub id: String,
    pub question: String,
    /// Topic entity id → display label.
    pub topic_entities: BTreeMap<EntityId, String>,
    pub answers: Vec<Answer>,
    pub gold_query: String,
}

impl BenchmarkSample {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty sample id".into());
        }
        if self.topic_entities.is_empty() {
            return Err(format!("sample {}: no topic entities", self.id));
        }
        if self.answers.is_empty() {
            return Err(format!("sample {}: no answers", self.id));
        }
        Ok(())
    }
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<BenchmarkSample>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| DatasetError::Record {
            path: origin.to_string(),
            line: idx + 1,
            message,
        };
        let sample: BenchmarkSample =
            serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        sample.validate().map_err(record)?;
        if !ids.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId(sample.id));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BenchmarkSample>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

/// Write any serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, DatasetError> {
    let path = path.as_ref();
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Record {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
