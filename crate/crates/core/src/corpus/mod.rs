//! Document/summary corpora: JSONL ingestion, tokenization and vocabularies.

mod text;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use text::{split_words, tokenize, TokenSequence, Word};
pub use vocab::{build_vocab, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One document with its reference summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub id: String,
    pub split: Split,
    pub document: String,
    #[serde(default)]
    pub summary: String,
}

impl DocumentRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.document.trim().is_empty() {
            return Err(format!("record {:?} has an empty document", self.id));
        }
        if self.split != Split::Test && self.summary.trim().is_empty() {
            return Err(format!(
                "record {:?} in split {} has an empty summary",
                self.id, self.split
            ));
        }
        Ok(())
    }
}

/// Records in file order with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<DocumentRecord>,
}

impl Corpus {
    pub fn new(records: Vec<DocumentRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate().map_err(|m| Error::parse(i + 1, m))?;
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
        }
        Ok(Corpus { records })
    }

    /// Parses JSONL text, one record per non-blank line.
    pub fn parse_jsonl(input: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in input.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocumentRecord =
                serde_json::from_str(line).map_err(|e| Error::parse(lineno, e.to_string()))?;
            rec.validate().map_err(|m| Error::parse(lineno, m))?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateId(rec.id));
            }
            records.push(rec);
        }
        Ok(Corpus { records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn records(&self) -> &[DocumentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DocumentRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DocumentRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Reads a JSONL corpus from disk.
pub fn ingest(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse_jsonl(&text)
}

pub fn save(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, corpus.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Length caps applied when a corpus is tokenized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthCaps {
    pub document: usize,
    pub summary: usize,
}

impl Default for LengthCaps {
    fn default() -> Self {
        LengthCaps {
            document: 1024,
            summary: 1024,
        }
    }
}

/// A record after tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub id: String,
    pub split: Split,
    pub document: TokenSequence,
    pub summary: TokenSequence,
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, caps: LengthCaps) -> Vec<EncodedRecord> {
    corpus
        .records()
        .iter()
        .map(|r| EncodedRecord {
            id: r.id.clone(),
            split: r.split,
            document: tokenize(&r.document, vocab, caps.document),
            summary: tokenize(&r.summary, vocab, caps.summary),
        })
        .collect()
}
