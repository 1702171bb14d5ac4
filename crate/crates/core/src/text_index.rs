//! TF-IDF term statistics and cosine similarity.
//!
//! Every retrieval context in the pipeline (golden-knowledge lookup, edge
//! weighting during pruning, relevant-graph selection) builds its own
//! [`TfIdfIndex`] and compares texts with [`TfIdfIndex::similarity`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const INDEX_FORMAT: &str = "vulrtex-tfidf";
const INDEX_VERSION: u32 = 1;

/// English function words removed by [`StopwordList::English50`] (version 1).
pub const ENGLISH_STOPWORDS_V1: [&str; 50] = [
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "but", "by", "can", "could", "do", "for", "from", "had", "has", "have", "he", "her", "his",
    "if", "in", "into", "is", "it", "its", "of", "on", "or", "our", "she", "so", "than", "that",
    "the", "their", "then", "there", "they", "this", "to", "was", "we", "with",
];

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("index file: {0}")]
    Io(#[from] std::io::Error),
    #[error("index file is not valid: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StopwordList {
    None,
    #[default]
    English50,
}

impl StopwordList {
    fn contains(self, token: &str) -> bool {
        match self {
            StopwordList::None => false,
            StopwordList::English50 => ENGLISH_STOPWORDS_V1.binary_search(&token).is_ok(),
        }
    }
}

/// Token shapes the tokenizer can emit. Only one is supported today.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenPattern {
    /// Runs of alphanumerics and hyphens, with leading/trailing hyphens trimmed.
    #[default]
    AlnumHyphen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub token_pattern: TokenPattern,
    pub stopwords: StopwordList,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { lowercase: true, token_pattern: TokenPattern::AlnumHyphen, stopwords: StopwordList::English50 }
    }
}

impl TokenizerConfig {
    /// Same tokenization, no stopword removal.
    pub fn without_stopwords() -> Self {
        Self { stopwords: StopwordList::None, ..Self::default() }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut current = String::new();
        let flush = |current: &mut String, out: &mut Vec<String>| {
            let trimmed = current.trim_matches('-');
            if !trimmed.is_empty() {
                let token = if self.lowercase { trimmed.to_lowercase() } else { trimmed.to_string() };
                if !self.stopwords.contains(&token) {
                    out.push(token);
                }
            }
            current.clear();
        };
        for ch in text.chars() {
            if ch.is_alphanumeric() || ch == '-' {
                current.push(ch);
            } else {
                flush(&mut current, &mut out);
            }
        }
        flush(&mut current, &mut out);
        out
    }
}

/// Sparse tf-idf weights keyed by term id. Kept sorted so that dot products
/// accumulate in the same order regardless of argument order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermVector {
    pub weights: BTreeMap<u32, f64>,
}

impl TermVector {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.weights.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &TermVector) -> f64 {
        let mut a = self.weights.iter().peekable();
        let mut b = other.weights.iter().peekable();
        let mut acc = 0.0;
        while let (Some((ka, wa)), Some((kb, wb))) = (a.peek(), b.peek()) {
            match ka.cmp(kb) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += **wa * **wb;
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }

    pub fn cosine(&self, other: &TermVector) -> f64 {
        if self.is_empty() || other.is_empty() {
            return 0.0;
        }
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (self.dot(other) / denom).clamp(0.0, 1.0)
    }
}

/// Immutable term-statistics index.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfIndex {
    vocabulary: HashMap<String, u32>,
    terms: Vec<String>,
    doc_freq: Vec<u32>,
    n_docs: u32,
    config: TokenizerConfig,
}

impl TfIdfIndex {
    /// Builds the index. Term ids are assigned in order of first occurrence.
    pub fn build<S: AsRef<str>>(docs: &[S], config: TokenizerConfig) -> Result<Self, IndexError> {
        if docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let mut vocabulary = HashMap::new();
        let mut terms: Vec<String> = Vec::new();
        let mut doc_freq: Vec<u32> = Vec::new();
        for doc in docs {
            let mut seen = Vec::new();
            for token in config.tokenize(doc.as_ref()) {
                let id = *vocabulary.entry(token.clone()).or_insert_with(|| {
                    terms.push(token);
                    doc_freq.push(0);
                    (terms.len() - 1) as u32
                });
                if !seen.contains(&id) {
                    seen.push(id);
                    doc_freq[id as usize] += 1;
                }
            }
        }
        Ok(Self { vocabulary, terms, doc_freq, n_docs: docs.len() as u32, config })
    }

    pub fn n_docs(&self) -> u32 {
        self.n_docs
    }

    pub fn vocabulary_len(&self) -> usize {
        self.terms.len()
    }

    pub fn config(&self) -> TokenizerConfig {
        self.config
    }

    pub fn term_id(&self, term: &str) -> Option<u32> {
        self.vocabulary.get(term).copied()
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn doc_freq(&self, term: &str) -> Option<u32> {
        self.term_id(term).map(|id| self.doc_freq[id as usize])
    }

    /// Smoothed inverse document frequency, `ln((1 + n) / (1 + df)) + 1`.
    pub fn idf(&self, term: &str) -> Option<f64> {
        self.term_id(term).map(|id| self.idf_by_id(id))
    }

    fn idf_by_id(&self, id: u32) -> f64 {
        let n = f64::from(self.n_docs);
        let df = f64::from(self.doc_freq[id as usize]);
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }

    /// Raw term counts times idf; terms outside the vocabulary are dropped.
    pub fn vectorize(&self, text: &str) -> TermVector {
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for token in self.config.tokenize(text) {
            if let Some(id) = self.term_id(&token) {
                *counts.entry(id).or_default() += 1;
            }
        }
        let weights = counts
            .into_iter()
            .map(|(id, tf)| (id, f64::from(tf) * self.idf_by_id(id)))
            .collect();
        TermVector { weights }
    }

    /// Cosine of the two tf-idf vectors, 0 when either is empty.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        self.vectorize(a).cosine(&self.vectorize(b))
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let file = IndexFile {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            config: self.config,
            n_docs: self.n_docs,
            terms: self.terms.clone(),
            doc_freq: self.doc_freq.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| IndexError::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let raw = fs::read_to_string(path)?;
        let file: IndexFile = serde_json::from_str(&raw).map_err(|e| IndexError::Format(e.to_string()))?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(IndexError::Format(format!(
                "unsupported header {} v{}",
                file.format, file.version
            )));
        }
        if file.terms.len() != file.doc_freq.len() {
            return Err(IndexError::Format("term and df tables differ in length".into()));
        }
        if file.doc_freq.iter().any(|&df| df > file.n_docs) {
            return Err(IndexError::Format("document frequency exceeds document count".into()));
        }
        let vocabulary = file
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        if vocabulary.len() != file.terms.len() {
            return Err(IndexError::Format("duplicate term in term table".into()));
        }
        Ok(Self {
            vocabulary,
            terms: file.terms,
            doc_freq: file.doc_freq,
            n_docs: file.n_docs,
            config: file.config,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    config: TokenizerConfig,
    n_docs: u32,
    terms: Vec<String>,
    doc_freq: Vec<u32>,
}
