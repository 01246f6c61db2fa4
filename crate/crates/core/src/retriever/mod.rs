//! Exemplar retrieval: ROUGE-based coarse pooling over the training
//! summaries, the contrastive dense retriever with head voting, and the
//! random, TF-IDF and oracle baselines.

mod model;
mod tfidf;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{EncodedRecord, Split, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::rouge_avg;

pub use model::{
    contrastive_loss, head_cosines, head_similarities, train_retriever, DenseIndex, RetrieverConfig,
    RetrieverModel, RetrieverTrainConfig, Side,
};
pub use tfidf::{salient_extract, sparse_cosine, IdfTable, SparseVec};

/// One training summary available for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: String,
    pub summary: TokenSequence,
}

/// The retrieval corpus K: every train-split summary plus the TF-IDF
/// statistics fitted on train documents and summaries.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
    index: HashMap<String, usize>,
    idf: IdfTable,
    summary_vecs: Vec<SparseVec>,
}

impl KnowledgeBase {
    pub fn from_records(records: &[EncodedRecord]) -> Result<Self> {
        let train: Vec<&EncodedRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
        if train.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let idf = IdfTable::fit(
            train
                .iter()
                .flat_map(|r| [r.document.ids.as_slice(), r.summary.ids.as_slice()]),
        );
        let entries: Vec<KbEntry> = train
            .iter()
            .map(|r| KbEntry {
                id: r.id.clone(),
                summary: r.summary.clone(),
            })
            .collect();
        let index = entries.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        let summary_vecs = entries.iter().map(|e| idf.vector(&e.summary)).collect();
        Ok(KnowledgeBase {
            entries,
            index,
            idf,
            summary_vecs,
        })
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn summary_of(&self, id: &str) -> Result<&TokenSequence> {
        self.index_of(id)
            .map(|i| &self.entries[i].summary)
            .ok_or_else(|| Error::UnknownCandidate(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub cap: usize,
    pub positives: usize,
    /// Sentences kept by the salient extractor when scoring the query.
    pub salient_sentences: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            cap: 100,
            positives: 8,
            salient_sentences: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// R̃ between the query's salient extract and this summary.
    pub coarse: f64,
    /// R̃ between this summary and the query's gold summary.
    pub label: f64,
    pub positive: bool,
}

/// Candidates ordered by coarse score (desc, then id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Scores every knowledge-base summary except the query's own against the
/// query's salient extract and keeps the best `cap`. Positives are the top
/// `positives` by label score; an empty gold summary labels everything 0.
pub fn coarse_rank(query: &EncodedRecord, kb: &KnowledgeBase, cfg: &PoolConfig) -> Result<CandidatePool> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    if cfg.cap == 0 || cfg.salient_sentences == 0 {
        return Err(Error::Config("pool cap and salient sentence count must be at least 1".into()));
    }
    let extract = salient_extract(&query.document, cfg.salient_sentences, kb.idf());
    let mut scored: Vec<(f64, &str, &TokenSequence)> = kb
        .entries()
        .iter()
        .filter(|e| e.id != query.id)
        .map(|e| (rouge_avg(&extract, &e.summary), e.id.as_str(), &e.summary))
        .collect();
    scored.sort_by(|a, b| by_score_then_id((a.0, a.1), (b.0, b.1)));
    scored.truncate(cfg.cap);

    let mut candidates: Vec<Candidate> = scored
        .into_iter()
        .map(|(coarse, id, summary)| Candidate {
            id: id.to_string(),
            coarse,
            label: if query.summary.is_empty() {
                0.0
            } else {
                rouge_avg(summary, &query.summary)
            },
            positive: false,
        })
        .collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        by_score_then_id(
            (candidates[a].label, &candidates[a].id),
            (candidates[b].label, &candidates[b].id),
        )
    });
    for &i in order.iter().take(cfg.positives) {
        candidates[i].positive = true;
    }
    Ok(CandidatePool {
        query_id: query.id.clone(),
        candidates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Dense,
    Tfidf,
    Random,
    Oracle,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::Dense => "dense",
            RetrievalMode::Tfidf => "tfidf",
            RetrievalMode::Random => "random",
            RetrievalMode::Oracle => "oracle",
        })
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(RetrievalMode::Dense),
            "tfidf" => Ok(RetrievalMode::Tfidf),
            "random" => Ok(RetrievalMode::Random),
            "oracle" => Ok(RetrievalMode::Oracle),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    /// Heads that nominated this candidate (0 for the baselines).
    pub votes: usize,
    /// Mean cosine over heads for dense retrieval; the ranking score
    /// otherwise.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub query_id: String,
    pub mode: RetrievalMode,
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.exemplars.iter().map(|e| e.id.as_str())
    }
}

/// Head voting. `scores[i][h]` is head `h`'s cosine for candidate `ids[i]`.
/// Each head nominates its top `e`; candidates are then ordered by
/// (votes desc, mean cosine desc, id asc) and the first `e` returned.
pub fn vote(ids: &[&str], scores: &[Vec<f64>], e: usize) -> Vec<Exemplar> {
    let heads = scores.first().map_or(0, Vec::len);
    let mut votes = vec![0usize; ids.len()];
    let mut order: Vec<usize> = (0..ids.len()).collect();
    for h in 0..heads {
        order.sort_by(|&a, &b| by_score_then_id((scores[a][h], ids[a]), (scores[b][h], ids[b])));
        for &i in order.iter().take(e) {
            votes[i] += 1;
        }
    }
    let mean: Vec<f64> = scores
        .iter()
        .map(|s| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 })
        .collect();
    order.sort_by(|&a, &b| {
        votes[b]
            .cmp(&votes[a])
            .then_with(|| by_score_then_id((mean[a], ids[a]), (mean[b], ids[b])))
    });
    order
        .into_iter()
        .take(e)
        .map(|i| Exemplar {
            id: ids[i].to_string(),
            votes: votes[i],
            score: mean[i],
        })
        .collect()
}

/// Dense retrieval: coarse pool, per-head cosines against the cached
/// candidate representations, then head voting.
pub fn retrieve(
    model: &RetrieverModel,
    index: &DenseIndex,
    query: &EncodedRecord,
    kb: &KnowledgeBase,
    pool: &PoolConfig,
    e: usize,
) -> Result<ExemplarSet> {
    let pool = coarse_rank(query, kb, pool)?;
    let q = model.represent(&query.document, Side::Query)?;
    let heads = model.config.sim_heads;
    let ids: Vec<&str> = pool.candidates.iter().map(|c| c.id.as_str()).collect();
    let scores: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            let i = kb.index_of(id).ok_or_else(|| Error::UnknownCandidate(id.to_string()))?;
            Ok(head_similarities(&q, index.get(i), heads))
        })
        .collect::<Result<_>>()?;
    Ok(ExemplarSet {
        query_id: query.id.clone(),
        mode: RetrievalMode::Dense,
        exemplars: vote(&ids, &scores, e),
    })
}

/// Top `e` of all non-self entries under `score`, ties broken by id.
fn top_by(query: &EncodedRecord, kb: &KnowledgeBase, e: usize, mode: RetrievalMode, score: impl Fn(usize) -> f64) -> ExemplarSet {
    let mut scored: Vec<(f64, &str)> = kb
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, en)| en.id != query.id)
        .map(|(i, en)| (score(i), en.id.as_str()))
        .collect();
    scored.sort_by(|a, b| by_score_then_id(*a, *b));
    ExemplarSet {
        query_id: query.id.clone(),
        mode,
        exemplars: scored
            .into_iter()
            .take(e)
            .map(|(s, id)| Exemplar {
                id: id.to_string(),
                votes: 0,
                score: s,
            })
            .collect(),
    }
}

/// Uniform sample without replacement, seeded by `seed` and the query id.
pub fn retrieve_random(query: &EncodedRecord, kb: &KnowledgeBase, e: usize, seed: u64) -> Result<ExemplarSet> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    let digest = Sha256::digest(query.id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes));
    let pool: Vec<&KbEntry> = kb.entries().iter().filter(|en| en.id != query.id).collect();
    let picks = rand::seq::index::sample(&mut rng, pool.len(), e.min(pool.len()));
    Ok(ExemplarSet {
        query_id: query.id.clone(),
        mode: RetrievalMode::Random,
        exemplars: picks
            .into_iter()
            .map(|i| Exemplar {
                id: pool[i].id.clone(),
                votes: 0,
                score: 0.0,
            })
            .collect(),
    })
}

/// Top `e` summaries by TF-IDF cosine to the query document.
pub fn retrieve_tfidf(query: &EncodedRecord, kb: &KnowledgeBase, e: usize) -> Result<ExemplarSet> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    let q = kb.idf.vector(&query.document);
    Ok(top_by(query, kb, e, RetrievalMode::Tfidf, |i| sparse_cosine(&q, &kb.summary_vecs[i])))
}

/// Top `e` summaries by R̃ against the query's gold summary.
pub fn retrieve_oracle(query: &EncodedRecord, kb: &KnowledgeBase, e: usize) -> Result<ExemplarSet> {
    if kb.is_empty() {
        return Err(Error::EmptyKnowledgeBase);
    }
    Ok(top_by(query, kb, e, RetrievalMode::Oracle, |i| {
        rouge_avg(&kb.entries[i].summary, &query.summary)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenId;

    fn rec(id: &str, split: Split, doc: &[&[TokenId]], summary: &[TokenId]) -> EncodedRecord {
        let mut d = TokenSequence::default();
        for s in doc {
            let start = d.ids.len();
            d.ids.extend_from_slice(s);
            d.sentence_spans.push((start, d.ids.len()));
        }
        EncodedRecord {
            id: id.into(),
            split,
            document: d,
            summary: TokenSequence::from_ids(summary.to_vec()),
        }
    }

    fn kb_of(n: usize) -> (Vec<EncodedRecord>, KnowledgeBase) {
        let recs: Vec<EncodedRecord> = (0..n)
            .map(|i| {
                let t = 10 + i as TokenId;
                rec(&format!("r{i:03}"), Split::Train, &[&[t, 7, 8]], &[t, 7, (i % 5) as TokenId + 100])
            })
            .collect();
        let kb = KnowledgeBase::from_records(&recs).unwrap();
        (recs, kb)
    }

    #[test]
    fn pool_capped_at_100() {
        let (recs, kb) = kb_of(151);
        let pool = coarse_rank(&recs[0], &kb, &PoolConfig::default()).unwrap();
        assert_eq!(pool.candidates.len(), 100);
        assert_eq!(pool.candidates.iter().filter(|c| c.positive).count(), 8);
        assert!(pool.candidates.iter().all(|c| c.id != "r000"));
    }

    #[test]
    fn small_kb_clamps() {
        let (recs, kb) = kb_of(6);
        let pool = coarse_rank(&recs[0], &kb, &PoolConfig::default()).unwrap();
        assert_eq!(pool.candidates.len(), 5);
        assert_eq!(pool.candidates.iter().filter(|c| c.positive).count(), 5);
    }

    #[test]
    fn positives_are_top_by_label() {
        let (recs, kb) = kb_of(40);
        let pool = coarse_rank(&recs[3], &kb, &PoolConfig::default()).unwrap();
        let min_pos = pool
            .candidates
            .iter()
            .filter(|c| c.positive)
            .map(|c| c.label)
            .fold(f64::INFINITY, f64::min);
        let max_neg = pool
            .candidates
            .iter()
            .filter(|c| !c.positive)
            .map(|c| c.label)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos >= max_neg);
    }

    #[test]
    fn empty_kb_errors() {
        let recs = vec![rec("t", Split::Test, &[&[1]], &[1])];
        assert!(matches!(KnowledgeBase::from_records(&recs), Err(Error::EmptyKnowledgeBase)));
    }

    #[test]
    fn head_slices() {
        let s = head_similarities(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(s, vec![1.0, 0.0]);
        let v = [0.3, -1.0, 2.0, 0.5];
        assert!(head_similarities(&v, &v, 2).iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert_eq!(head_similarities(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 2), vec![0.0, 0.0]);
    }

    #[test]
    fn voting_tie_break_by_mean_cosine() {
        // Head 0 nominates {A, B}, head 1 nominates {A, C}.
        let ids = ["A", "B", "C"];
        let scores = vec![vec![1.0, 1.0], vec![0.9, 0.9], vec![-0.55, 0.95]];
        let out = vote(&ids, &scores, 2);
        let got: Vec<&str> = out.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(got, vec!["A", "B"]);
        assert_eq!(out[0].votes, 2);
        assert_eq!(out[1].votes, 1);
    }

    #[test]
    fn single_head_vote_is_top_e() {
        let ids = ["a", "b", "c", "d"];
        let scores = vec![vec![0.1], vec![0.7], vec![0.4], vec![0.7]];
        let got: Vec<String> = vote(&ids, &scores, 3).into_iter().map(|e| e.id).collect();
        assert_eq!(got, vec!["b", "d", "c"]);
    }

    #[test]
    fn contrastive_closed_forms() {
        assert_eq!(contrastive_loss(&[vec![0.3]], &[vec![]], 0.1), 0.0);
        for tau in [0.05, 0.1, 1.0] {
            let l = contrastive_loss(&[vec![0.4]], &[vec![0.4]], tau);
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let one = contrastive_loss(&[vec![0.2, 0.5]], &[vec![0.1, 0.3]], 0.1);
        let two = contrastive_loss(&[vec![0.2, 0.5], vec![0.2, 0.5]], &[vec![0.1, 0.3], vec![0.1, 0.3]], 0.1);
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn tfidf_prefers_rare_overlap() {
        // The query shares rare tokens 90 and 91 with k2 only; 1 and 2 are
        // everywhere.
        let recs = vec![
            rec("k1", Split::Train, &[&[1, 2]], &[1, 2, 3]),
            rec("k2", Split::Train, &[&[1, 2]], &[1, 90, 91]),
            rec("k3", Split::Train, &[&[1, 2]], &[2, 4]),
            rec("k4", Split::Train, &[&[1, 2]], &[1, 2, 5]),
        ];
        let kb = KnowledgeBase::from_records(&recs).unwrap();
        let q = rec("q", Split::Test, &[&[1, 2, 90, 91]], &[]);
        let out = retrieve_tfidf(&q, &kb, 2).unwrap();
        assert_eq!(out.exemplars[0].id, "k2");
    }

    #[test]
    fn baselines_exclude_self_and_are_deterministic() {
        let (recs, kb) = kb_of(30);
        for q in &recs[..5] {
            let a = retrieve_random(q, &kb, 5, 3).unwrap();
            assert_eq!(a, retrieve_random(q, &kb, 5, 3).unwrap());
            assert_eq!(a.exemplars.len(), 5);
            for set in [a, retrieve_tfidf(q, &kb, 5).unwrap(), retrieve_oracle(q, &kb, 5).unwrap()] {
                assert!(set.ids().all(|id| id != q.id));
                let mut ids: Vec<&str> = set.ids().collect();
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), 5);
            }
        }
    }

    #[test]
    fn mode_parses() {
        for m in [RetrievalMode::Dense, RetrievalMode::Tfidf, RetrievalMode::Random, RetrievalMode::Oracle] {
            assert_eq!(m.to_string().parse::<RetrievalMode>().unwrap(), m);
        }
        assert!("bm25".parse::<RetrievalMode>().is_err());
    }
}
