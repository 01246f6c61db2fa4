//! Exemplar-conditioned summarizer: input assembly with sentence-group
//! tags, the encoder-decoder, and teacher-forced training.

mod model;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedRecord, Split, TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::retriever::{ExemplarSet, KnowledgeBase};

pub use model::{
    train_summarizer, DecodeOutput, SummarizerConfig, SummarizerModel, SummarizerTrainConfig, TagPlacement,
    TrainingExample,
};

/// Length limits applied while assembling inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    /// Document tokens kept (specials excluded).
    pub document: usize,
    /// Tokens kept per exemplar before assembly.
    pub per_exemplar: usize,
    /// Total exemplar budget, counting each exemplar's `[CLS]` and `[SEP]`.
    pub exemplar_total: usize,
    /// Number of group tags N; sentence indices clamp to `N - 1`.
    pub max_tags: usize,
    /// Exemplars used per input (e).
    pub exemplars: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            document: 1024,
            per_exemplar: 64,
            exemplar_total: 768,
            max_tags: 32,
            exemplars: 5,
        }
    }
}

impl Budgets {
    /// Longest sequence `assemble` can produce.
    pub fn max_input_len(&self) -> usize {
        self.document + 2 + self.exemplar_total
    }
}

/// `[CLS] X [SEP] [CLS] E1 [SEP] … [CLS] Ek [SEP]` with one group tag per
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub ids: Vec<TokenId>,
    pub group_tags: Vec<usize>,
    pub exemplar_cls_positions: Vec<usize>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_exemplars(&self) -> usize {
        self.exemplar_cls_positions.len()
    }
}

/// Builds the tagged input. Document tokens and every special token get
/// G0; tokens of exemplar sentence `i` (1-based) get `min(i, N - 1)`.
/// Exemplars that no longer fit the total budget are truncated or dropped.
pub fn assemble(doc: &TokenSequence, exemplars: &[&TokenSequence], budgets: &Budgets) -> AssembledInput {
    assert!(budgets.max_tags >= 2, "need at least one exemplar tag besides G0");
    let doc_len = doc.len().min(budgets.document);
    let mut ids = Vec::with_capacity(budgets.max_input_len());
    ids.push(Vocabulary::CLS);
    ids.extend_from_slice(&doc.ids[..doc_len]);
    ids.push(Vocabulary::SEP);
    let mut group_tags = vec![0; ids.len()];
    let mut exemplar_cls_positions = Vec::new();

    let mut remaining = budgets.exemplar_total;
    for ex in exemplars.iter().take(budgets.exemplars) {
        if remaining < 3 {
            break;
        }
        let ex = ex.truncated(budgets.per_exemplar.min(remaining - 2));
        if ex.is_empty() {
            continue;
        }
        remaining -= ex.len() + 2;
        exemplar_cls_positions.push(ids.len());
        ids.push(Vocabulary::CLS);
        group_tags.push(0);
        let mut tags = vec![0; ex.len()];
        for (i, &(s, e)) in ex.sentence_spans.iter().enumerate() {
            let tag = (i + 1).min(budgets.max_tags - 1);
            tags[s..e].fill(tag);
        }
        ids.extend_from_slice(&ex.ids);
        group_tags.extend(tags);
        ids.push(Vocabulary::SEP);
        group_tags.push(0);
    }
    AssembledInput {
        ids,
        group_tags,
        exemplar_cls_positions,
    }
}

/// Sentence group of each position: 1 + the number of `[SEP]` tokens
/// strictly before it, clamped to `max_tags - 1`.
pub fn sentence_groups(ids: &[TokenId], max_tags: usize) -> Vec<usize> {
    let mut seps = 0;
    ids.iter()
        .map(|&t| {
            let g = (1 + seps).min(max_tags - 1);
            if t == Vocabulary::SEP {
                seps += 1;
            }
            g
        })
        .collect()
}

/// `[BOS] s1 [SEP] s2 … [EOS]` and its per-token sentence groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedTarget {
    pub ids: Vec<TokenId>,
    pub groups: Vec<usize>,
}

impl TaggedTarget {
    /// Builds the target, cutting content so the total including `[EOS]`
    /// stays within `max_len`.
    pub fn new(summary: &TokenSequence, max_len: usize, max_tags: usize) -> Result<Self> {
        if summary.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if max_len < 3 {
            return Err(Error::Config(format!("target length {max_len} leaves no room for content")));
        }
        let mut ids = vec![Vocabulary::BOS];
        for (i, s) in summary.sentences().enumerate() {
            if i > 0 {
                ids.push(Vocabulary::SEP);
            }
            ids.extend_from_slice(s);
        }
        ids.truncate(max_len - 1);
        if ids.last() == Some(&Vocabulary::SEP) {
            ids.pop();
        }
        ids.push(Vocabulary::EOS);
        let groups = sentence_groups(&ids, max_tags);
        Ok(TaggedTarget { ids, groups })
    }
}

/// Teacher-forcing examples for every record of `split`. With `exemplars`
/// set, each record needs an exemplar set; `None` is the retrieval-ablated
/// mode with document-only inputs.
pub fn build_examples(
    records: &[EncodedRecord],
    split: Split,
    exemplars: Option<&HashMap<String, ExemplarSet>>,
    kb: &KnowledgeBase,
    budgets: &Budgets,
    max_target_len: usize,
) -> Result<Vec<TrainingExample>> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let input = input_for(r, exemplars, kb, budgets)?;
            let target = TaggedTarget::new(&r.summary, max_target_len, budgets.max_tags)?;
            Ok(TrainingExample {
                id: r.id.clone(),
                input,
                target,
            })
        })
        .collect()
}

/// Assembled input for one record under the given exemplar source.
pub fn input_for(
    record: &EncodedRecord,
    exemplars: Option<&HashMap<String, ExemplarSet>>,
    kb: &KnowledgeBase,
    budgets: &Budgets,
) -> Result<AssembledInput> {
    let summaries: Vec<&TokenSequence> = match exemplars {
        None => Vec::new(),
        Some(sets) => {
            let set = sets
                .get(&record.id)
                .ok_or_else(|| Error::MissingExemplars(record.id.clone()))?;
            set.ids().map(|id| kb.summary_of(id)).collect::<Result<_>>()?
        }
    };
    Ok(assemble(&record.document, &summaries, budgets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(sentences: &[&[TokenId]]) -> TokenSequence {
        let mut out = TokenSequence::default();
        for s in sentences {
            let start = out.ids.len();
            out.ids.extend_from_slice(s);
            out.sentence_spans.push((start, out.ids.len()));
        }
        out
    }

    #[test]
    fn tagging_by_hand() {
        let doc = seq(&[&[10, 11, 12]]);
        let ex = seq(&[&[20, 21], &[22, 23, 24]]);
        let a = assemble(&doc, &[&ex], &Budgets::default());
        assert_eq!(a.ids, vec![2, 10, 11, 12, 3, 2, 20, 21, 22, 23, 24, 3]);
        assert_eq!(a.group_tags, vec![0, 0, 0, 0, 0, 0, 1, 1, 2, 2, 2, 0]);
        assert_eq!(a.exemplar_cls_positions, vec![5]);
    }

    #[test]
    fn no_exemplars_all_g0() {
        let a = assemble(&seq(&[&[7, 8], &[9]]), &[], &Budgets::default());
        assert!(a.group_tags.iter().all(|&t| t == 0));
        assert_eq!(a.num_exemplars(), 0);
    }

    #[test]
    fn tags_clamp_at_n_minus_one() {
        let sentences: Vec<Vec<TokenId>> = (0..40).map(|i| vec![10 + i]).collect();
        let refs: Vec<&[TokenId]> = sentences.iter().map(Vec::as_slice).collect();
        let ex = seq(&refs);
        let a = assemble(&seq(&[&[6]]), &[&ex], &Budgets::default());
        let tags = &a.group_tags[4..44];
        assert_eq!(tags[29], 30);
        assert!(tags[30..].iter().all(|&t| t == 31));
        assert_eq!(*a.group_tags.iter().max().unwrap(), 31);
    }

    #[test]
    fn exemplar_budget_counts_specials() {
        let ex = seq(&[&[20; 10]]);
        let budgets = Budgets {
            exemplar_total: 25,
            ..Budgets::default()
        };
        let a = assemble(&seq(&[&[6]]), &[&ex, &ex, &ex], &budgets);
        // 12 + 12 fit, the third gets nothing (1 left).
        assert_eq!(a.num_exemplars(), 2);
        assert_eq!(a.len() - 3, 24);
        let budgets = Budgets {
            exemplar_total: 30,
            ..Budgets::default()
        };
        let a = assemble(&seq(&[&[6]]), &[&ex, &ex, &ex], &budgets);
        assert_eq!(a.num_exemplars(), 3);
        assert_eq!(a.len() - 3, 30);
    }

    #[test]
    fn sentence_group_rule() {
        // [BOS] w1 [SEP] w2
        assert_eq!(sentence_groups(&[4, 10, 3, 11], 32), vec![1, 1, 1, 2]);
        assert_eq!(sentence_groups(&[3, 3, 3, 9], 3), vec![1, 2, 2, 2]);
    }

    #[test]
    fn target_layout() {
        let t = TaggedTarget::new(&seq(&[&[10, 11], &[12]]), 128, 32).unwrap();
        assert_eq!(t.ids, vec![4, 10, 11, 3, 12, 5]);
        assert_eq!(t.groups, vec![1, 1, 1, 1, 2, 2]);
        let t = TaggedTarget::new(&seq(&[&[10, 11], &[12]]), 4, 32).unwrap();
        assert_eq!(t.ids, vec![4, 10, 11, 5]);
        assert!(matches!(TaggedTarget::new(&TokenSequence::default(), 8, 32), Err(Error::EmptyTarget)));
    }
}
