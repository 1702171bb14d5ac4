//! Vulnerability-awareness store and threshold retrieval of golden
//! knowledge for path correction.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, write_jsonl, CorpusError};
use crate::text_index::{IndexError, TfIdfIndex, TokenizerConfig};

pub const STORE_FILE: &str = "va_store.jsonl";
pub const INDEX_FILE: &str = "va_index.json";
/// Records passed to the correction prompt at most.
pub const GOLDEN_CAP: usize = 5;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("duplicate key {key} in source {source_name}")]
    DuplicateKey { source_name: String, key: String },
    #[error("record {key} in source {source_name} has empty text")]
    EmptyText { source_name: String, key: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub source: String,
    pub key: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe_id: Option<String>,
}

/// Immutable after ingest. The index covers the record texts only.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeStore {
    records: Vec<KnowledgeRecord>,
    index: Option<TfIdfIndex>,
}

impl KnowledgeStore {
    pub fn ingest(records: Vec<KnowledgeRecord>) -> Result<Self, KnowledgeError> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.text.trim().is_empty() {
                return Err(KnowledgeError::EmptyText { source_name: r.source.clone(), key: r.key.clone() });
            }
            if !seen.insert((r.source.as_str(), r.key.as_str())) {
                return Err(KnowledgeError::DuplicateKey { source_name: r.source.clone(), key: r.key.clone() });
            }
        }
        let index = if records.is_empty() {
            None
        } else {
            let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
            Some(TfIdfIndex::build(&texts, TokenizerConfig::default())?)
        };
        Ok(Self { records, index })
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, KnowledgeError> {
        Self::ingest(read_jsonl(path)?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[KnowledgeRecord] {
        &self.records
    }

    pub fn index(&self) -> Option<&TfIdfIndex> {
        self.index.as_ref()
    }

    /// Similarity of `text` to every record, in store order.
    pub fn similarities(&self, text: &str) -> Vec<f64> {
        let Some(index) = &self.index else { return Vec::new() };
        let q = index.vectorize(text);
        self.records.iter().map(|r| index.vectorize(&r.text).cosine(&q)).collect()
    }

    /// Records with similarity strictly above `theta_sim`, best first, ties
    /// by key then source.
    pub fn retrieve_golden(&self, path_text: &str, theta_sim: f64) -> Vec<(&KnowledgeRecord, f64)> {
        let mut hits: Vec<(&KnowledgeRecord, f64)> = self
            .records
            .iter()
            .zip(self.similarities(path_text))
            .filter(|(_, s)| *s > theta_sim)
            .collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| a.0.key.cmp(&b.0.key)).then_with(|| a.0.source.cmp(&b.0.source))
        });
        hits
    }

    /// Writes `va_store.jsonl` and the index sidecar into `db`.
    pub fn save(&self, db: &Path) -> Result<(), KnowledgeError> {
        fs::create_dir_all(db)?;
        write_jsonl(&db.join(STORE_FILE), &self.records)?;
        let index_path = db.join(INDEX_FILE);
        match &self.index {
            Some(index) => index.save(&index_path)?,
            None if index_path.exists() => fs::remove_file(&index_path)?,
            None => {}
        }
        Ok(())
    }

    /// Loads a saved store; the index is rebuilt when the sidecar is missing
    /// or disagrees with the record count.
    pub fn load(db: &Path) -> Result<Self, KnowledgeError> {
        let store_path = db.join(STORE_FILE);
        if !store_path.exists() {
            return Ok(Self::default());
        }
        let records: Vec<KnowledgeRecord> = read_jsonl(&store_path)?;
        let index_path = db.join(INDEX_FILE);
        if !records.is_empty() && index_path.exists() {
            let index = TfIdfIndex::load(&index_path)?;
            if index.n_docs() as usize == records.len() {
                let mut store = Self::ingest(Vec::new())?;
                store.records = records;
                store.index = Some(index);
                return Ok(store);
            }
        }
        Self::ingest(records)
    }
}
