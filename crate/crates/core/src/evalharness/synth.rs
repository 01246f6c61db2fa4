//! Seeded synthetic corpora with known cluster structure.
//!
//! The clustered corpus: each cluster owns topic keywords and several
//! summary styles. A document mentions its cluster's keywords, an entity,
//! filler, and one style cue word; its summary follows the cued style and
//! reuses the document's keywords and entity. The cue never appears in a
//! summary, so lexical retrieval cannot tell styles apart.
//!
//! The paraphrase corpus: documents and summaries describe a cluster's
//! concepts with disjoint word sets, and each summary picks one of several
//! synonyms per concept, so same-cluster texts share meaning but few words.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocumentRecord, Split};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: usize,
    pub train_per_cluster: usize,
    pub test_per_cluster: usize,
    pub styles: usize,
    pub keywords: usize,
    pub entities: usize,
    pub fillers: usize,
    pub doc_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 10,
            train_per_cluster: 50,
            test_per_cluster: 5,
            styles: 3,
            keywords: 8,
            entities: 30,
            fillers: 60,
            doc_sentences: 4,
            seed: 2024,
        }
    }
}

/// A generated corpus plus the cluster of every record.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub clusters: HashMap<String, usize>,
}

/// Distinct pronounceable pseudo-words.
struct Lexicon {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Lexicon {
    fn new(seed: u64) -> Self {
        Lexicon {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: BTreeSet::new(),
        }
    }

    fn word(&mut self) -> String {
        const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
        const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS[self.rng.gen_range(0..ONSETS.len())],
                        VOWELS[self.rng.gen_range(0..VOWELS.len())]
                    )
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }
}

fn sentence(words: &[&str]) -> String {
    format!("{} .", words.join(" "))
}

fn pick<'a>(rng: &mut impl Rng, xs: &'a [String]) -> &'a str {
    &xs[rng.gen_range(0..xs.len())]
}

/// Record ids are assigned after a shuffle so they carry no cluster order.
fn finish(mut items: Vec<(Split, usize, String, String)>, rng: &mut ChaCha8Rng) -> Result<SyntheticCorpus> {
    items.shuffle(rng);
    let mut clusters = HashMap::new();
    let mut records = Vec::with_capacity(items.len());
    let (mut n_train, mut n_test) = (0, 0);
    for (split, cluster, document, summary) in items {
        let id = match split {
            Split::Train => {
                n_train += 1;
                format!("train-{n_train:04}")
            }
            _ => {
                n_test += 1;
                format!("test-{n_test:04}")
            }
        };
        clusters.insert(id.clone(), cluster);
        records.push(DocumentRecord {
            id,
            split,
            document,
            summary,
        });
    }
    records.sort_by(|a, b| a.split.cmp(&b.split).then_with(|| a.id.cmp(&b.id)));
    Ok(SyntheticCorpus {
        corpus: Corpus::new(records)?,
        clusters,
    })
}

fn splits(cfg_train: usize, cfg_test: usize) -> impl Iterator<Item = Split> {
    std::iter::repeat(Split::Train)
        .take(cfg_train)
        .chain(std::iter::repeat(Split::Test).take(cfg_test))
}

/// Clustered corpus with style cues (see module docs).
pub fn clustered_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    let mut lex = Lexicon::new(cfg.seed);
    let fillers = lex.words(cfg.fillers);
    let entities = lex.words(cfg.entities);
    struct Cluster {
        keywords: Vec<String>,
        cues: Vec<String>,
        styles: Vec<Vec<String>>,
    }
    let clusters: Vec<Cluster> = (0..cfg.clusters)
        .map(|_| Cluster {
            keywords: lex.words(cfg.keywords),
            cues: lex.words(cfg.styles),
            styles: (0..cfg.styles).map(|_| lex.words(6)).collect(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1u64);
    let mut items = Vec::new();
    for (ci, c) in clusters.iter().enumerate() {
        for split in splits(cfg.train_per_cluster, cfg.test_per_cluster) {
            let style = rng.gen_range(0..cfg.styles);
            let entity = pick(&mut rng, &entities).to_string();
            let kws: Vec<&str> = c
                .keywords
                .choose_multiple(&mut rng, 3)
                .map(String::as_str)
                .collect();
            let cue_at = rng.gen_range(0..cfg.doc_sentences);
            let entity_at = rng.gen_range(0..cfg.doc_sentences);
            let mut doc = Vec::new();
            for s in 0..cfg.doc_sentences {
                let mut words: Vec<&str> = vec![kws[s % kws.len()], pick(&mut rng, &c.keywords)];
                for _ in 0..3 {
                    words.push(pick(&mut rng, &fillers));
                }
                if s == cue_at {
                    words.push(&c.cues[style]);
                }
                if s == entity_at {
                    words.push(&entity);
                }
                words.shuffle(&mut rng);
                doc.push(sentence(&words));
            }
            let st = &c.styles[style];
            let summary = [
                sentence(&[&st[0], &st[1], &entity, kws[0], &st[2]]),
                sentence(&[&st[3], kws[1], &st[4], kws[2], &st[5]]),
            ]
            .join(" ");
            items.push((split, ci, doc.join(" "), summary));
        }
    }
    finish(items, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParaphraseConfig {
    pub clusters: usize,
    pub train_per_cluster: usize,
    pub test_per_cluster: usize,
    /// Concepts per cluster.
    pub concepts: usize,
    /// Summary-side synonyms per concept.
    pub synonyms: usize,
    pub entities: usize,
    pub fillers: usize,
    /// Filler words appended to each summary.
    pub summary_fillers: usize,
    pub doc_sentences: usize,
    pub seed: u64,
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        ParaphraseConfig {
            clusters: 10,
            train_per_cluster: 50,
            test_per_cluster: 5,
            concepts: 4,
            synonyms: 2,
            entities: 300,
            fillers: 60,
            summary_fillers: 2,
            doc_sentences: 4,
            seed: 77,
        }
    }
}

/// Paraphrase corpus (see module docs). A document shares only its entity
/// and stray filler words with its summary.
pub fn paraphrase_corpus(cfg: &ParaphraseConfig) -> Result<SyntheticCorpus> {
    let mut lex = Lexicon::new(cfg.seed);
    let fillers = lex.words(cfg.fillers);
    let function_words = lex.words(4);
    let entities = lex.words(cfg.entities);
    struct Cluster {
        doc_words: Vec<String>,
        synonyms: Vec<Vec<String>>,
    }
    let clusters: Vec<Cluster> = (0..cfg.clusters)
        .map(|_| Cluster {
            doc_words: lex.words(cfg.concepts),
            synonyms: (0..cfg.concepts).map(|_| lex.words(cfg.synonyms)).collect(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9au64);
    let mut items = Vec::new();
    for (ci, c) in clusters.iter().enumerate() {
        for split in splits(cfg.train_per_cluster, cfg.test_per_cluster) {
            let entity = pick(&mut rng, &entities).to_string();
            let concepts: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.concepts, 3).into_vec();
            let entity_at = rng.gen_range(0..cfg.doc_sentences);
            let mut doc = Vec::new();
            for s in 0..cfg.doc_sentences {
                let mut words: Vec<&str> = vec![
                    &c.doc_words[concepts[s % 3]],
                    &c.doc_words[rng.gen_range(0..cfg.concepts)],
                ];
                for _ in 0..3 {
                    words.push(pick(&mut rng, &fillers));
                }
                if s == entity_at {
                    words.push(&entity);
                }
                words.shuffle(&mut rng);
                doc.push(sentence(&words));
            }
            let syn = |rng: &mut ChaCha8Rng, k: usize| pick(rng, &c.synonyms[k]).to_string();
            let (a, b, d) = (syn(&mut rng, concepts[0]), syn(&mut rng, concepts[1]), syn(&mut rng, concepts[2]));
            let mut words: Vec<&str> = vec![&entity, &function_words[0], &a, &function_words[1], &b, &function_words[2], &d];
            for _ in 0..cfg.summary_fillers {
                words.push(pick(&mut rng, &fillers));
            }
            let summary = sentence(&words);
            items.push((split, ci, doc.join(" "), summary));
        }
    }
    finish(items, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_words;

    #[test]
    fn sizes_and_determinism() {
        let cfg = SynthConfig::default();
        let a = clustered_corpus(&cfg).unwrap();
        assert_eq!(a.corpus.split(Split::Train).count(), 500);
        assert_eq!(a.corpus.split(Split::Test).count(), 50);
        let b = clustered_corpus(&cfg).unwrap();
        assert_eq!(a.corpus.to_jsonl(), b.corpus.to_jsonl());
        let p = paraphrase_corpus(&ParaphraseConfig::default()).unwrap();
        assert_eq!(p.corpus.len(), 550);
        assert_eq!(p.clusters.len(), 550);
    }

    #[test]
    fn cue_words_stay_out_of_summaries() {
        let s = clustered_corpus(&SynthConfig::default()).unwrap();
        let summary_words: BTreeSet<String> = s
            .corpus
            .records()
            .iter()
            .flat_map(|r| split_words(&r.summary).into_iter().map(|w| w.text))
            .collect();
        // Every document has exactly one word that appears in no summary
        // and in no document of another cluster: its cue. Check the weaker
        // property that every document has words absent from all summaries.
        for r in s.corpus.records() {
            assert!(split_words(&r.document).iter().any(|w| !summary_words.contains(&w.text)));
        }
    }

    #[test]
    fn topical_document_words_never_reach_summaries() {
        let s = paraphrase_corpus(&ParaphraseConfig::default()).unwrap();
        // word -> document count per cluster
        let mut counts: HashMap<String, HashMap<usize, usize>> = HashMap::new();
        for r in s.corpus.records() {
            let c = s.clusters[&r.id];
            let words: BTreeSet<String> = split_words(&r.document).into_iter().map(|w| w.text).collect();
            for w in words {
                *counts.entry(w).or_default().entry(c).or_default() += 1;
            }
        }
        let topical: BTreeSet<&String> = counts
            .iter()
            .filter(|(_, by)| by.len() == 1 && by.values().all(|&n| n >= 10))
            .map(|(w, _)| w)
            .collect();
        assert_eq!(topical.len(), 40);
        for r in s.corpus.records() {
            for w in split_words(&r.summary) {
                assert!(!topical.contains(&w.text), "{}", w.text);
            }
        }
    }
}
