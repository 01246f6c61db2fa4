use std::collections::HashMap;
use std::fmt::Write as _;

use super::text::split_words;
use super::Corpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Token ↔ id table with six reserved entries at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const CLS: TokenId = 2;
    pub const SEP: TokenId = 3;
    pub const BOS: TokenId = 4;
    pub const EOS: TokenId = 5;

    pub const RESERVED: [&'static str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"];

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < Self::RESERVED.len()
    }

    /// Surface forms for `ids`; out-of-range ids decode as `[UNK]`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(Self::RESERVED[Self::UNK as usize]))
            .collect()
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }

    /// `token<TAB>id` lines, ordered by id.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{id}").expect("write to string");
        }
        out
    }

    pub fn from_table(input: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected token<TAB>id"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(Error::parse(
                    lineno,
                    format!("id {id} out of sequence, expected {}", tokens.len()),
                ));
            }
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::parse(lineno, format!("bad token {tok:?}")));
            }
            if let Some(&reserved) = Self::RESERVED.get(id) {
                if tok != reserved {
                    return Err(Error::parse(
                        lineno,
                        format!("id {id} is reserved for {reserved}"),
                    ));
                }
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < Self::RESERVED.len() {
            return Err(Error::parse(input.lines().count().max(1), "missing reserved tokens"));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::parse(0, "duplicate token in table"));
        }
        Ok(vocab)
    }
}

/// Keeps the `cap - 6` most frequent words of every document and summary;
/// frequency ties break lexicographically.
pub fn build_vocab(corpus: &Corpus, cap: usize) -> Result<Vocabulary> {
    let reserved = Vocabulary::RESERVED.len();
    if cap <= reserved {
        return Err(Error::Config(format!(
            "vocabulary cap {cap} leaves no room beyond {reserved} reserved ids"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for rec in corpus.records() {
        for w in split_words(&rec.document).into_iter().chain(split_words(&rec.summary)) {
            *counts.entry(w.text).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let tokens = Vocabulary::RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t).take(cap - reserved))
        .collect();
    Ok(Vocabulary::from_tokens(tokens))
}
