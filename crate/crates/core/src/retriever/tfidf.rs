//! Sparse TF-IDF vectors shared by the lexical baseline and the salient
//! sentence extractor.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::corpus::{TokenId, TokenSequence};

/// Smoothed inverse document frequencies: `ln((1 + N) / (1 + df)) + 1`.
#[derive(Debug, Clone, Default)]
pub struct IdfTable {
    docs: usize,
    df: HashMap<TokenId, usize>,
}

pub type SparseVec = BTreeMap<TokenId, f64>;

impl IdfTable {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a [TokenId]>) -> Self {
        let mut table = IdfTable::default();
        for doc in docs {
            table.docs += 1;
            let uniq: HashSet<TokenId> = doc.iter().copied().collect();
            for t in uniq {
                *table.df.entry(t).or_insert(0) += 1;
            }
        }
        table
    }

    pub fn idf(&self, token: TokenId) -> f64 {
        let df = self.df.get(&token).copied().unwrap_or(0);
        ((1 + self.docs) as f64 / (1 + df) as f64).ln() + 1.0
    }

    /// Raw term counts weighted by idf.
    pub fn vector(&self, tokens: &[TokenId]) -> SparseVec {
        let mut v = SparseVec::new();
        for &t in tokens {
            *v.entry(t).or_insert(0.0) += 1.0;
        }
        for (t, w) in v.iter_mut() {
            *w *= self.idf(*t);
        }
        v
    }
}

pub fn sparse_cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(t, w)| large.get(t).map(|v| w * v))
        .sum();
    let na = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Keeps the `m` sentences whose TF-IDF vectors are closest (cosine) to the
/// whole document's TF-IDF vector, returned in document order. Ties favor
/// earlier sentences. Documents with at most `m` sentences are returned whole.
pub fn salient_extract(doc: &TokenSequence, m: usize, idf: &IdfTable) -> TokenSequence {
    let n = doc.sentence_spans.len();
    if n <= m {
        return doc.clone();
    }
    let centroid = idf.vector(&doc.ids);
    let mut scored: Vec<(usize, f64)> = doc
        .sentences()
        .enumerate()
        .map(|(i, s)| (i, sparse_cosine(&idf.vector(s), &centroid)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = scored.into_iter().take(m).map(|(i, _)| i).collect();
    keep.sort_unstable();
    doc.select_sentences(&keep)
}
