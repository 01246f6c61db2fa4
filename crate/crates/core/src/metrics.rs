//! ROUGE-1/2/L over token ids, and the three-way average used for
//! labeling, decoding credit and reporting.
//!
//! No stemming or stopword removal is applied: scores are computed on
//! exactly the tokens the tokenizer produces.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        if hyp_total == 0 || ref_total == 0 {
            return Prf::default();
        }
        Prf::new(
            overlap as f64 / hyp_total as f64,
            overlap as f64 / ref_total as f64,
        )
    }

    pub fn get(&self, measure: Measure) -> f64 {
        match measure {
            Measure::F1 => self.f1,
            Measure::Recall => self.recall,
        }
    }
}

/// Which component of a precision/recall/F1 triple a score refers to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    #[default]
    F1,
    Recall,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    #[default]
    R1,
    R2,
    Rl,
    /// Mean of R-1, R-2 and R-L.
    Avg,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
    pub avg: f64,
}

impl RougeScores {
    pub fn compute(hyp: &[TokenId], reference: &[TokenId]) -> Self {
        let r1 = rouge_n(hyp, reference, 1);
        let r2 = rouge_n(hyp, reference, 2);
        let rl = rouge_l(hyp, reference);
        RougeScores {
            r1,
            r2,
            rl,
            avg: (r1.f1 + r2.f1 + rl.f1) / 3.0,
        }
    }

    pub fn get(&self, variant: RougeVariant, measure: Measure) -> f64 {
        match variant {
            RougeVariant::R1 => self.r1.get(measure),
            RougeVariant::R2 => self.r2.get(measure),
            RougeVariant::Rl => self.rl.get(measure),
            RougeVariant::Avg => {
                (self.r1.get(measure) + self.r2.get(measure) + self.rl.get(measure)) / 3.0
            }
        }
    }

    /// Component-wise mean. Empty input gives all zeros.
    pub fn mean<'a>(scores: impl IntoIterator<Item = &'a RougeScores>) -> RougeScores {
        let mut n = 0usize;
        let mut acc = [0.0f64; 10];
        for s in scores {
            n += 1;
            let vals = [
                s.r1.precision,
                s.r1.recall,
                s.r1.f1,
                s.r2.precision,
                s.r2.recall,
                s.r2.f1,
                s.rl.precision,
                s.rl.recall,
                s.rl.f1,
                s.avg,
            ];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
        }
        if n == 0 {
            return RougeScores::default();
        }
        let m: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
        let prf = |i: usize| Prf {
            precision: m[i],
            recall: m[i + 1],
            f1: m[i + 2],
        };
        RougeScores {
            r1: prf(0),
            r2: prf(3),
            rl: prf(6),
            avg: m[9],
        }
    }
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n(hyp: &[TokenId], reference: &[TokenId], n: usize) -> Prf {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let overlap = hyp_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| if n == 0 { 0 } else { (len + 1).saturating_sub(n) };
    Prf::from_counts(overlap, total(hyp.len()), total(reference.len()))
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence based ROUGE.
pub fn rouge_l(hyp: &[TokenId], reference: &[TokenId]) -> Prf {
    Prf::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

/// Mean of the R-1, R-2 and R-L F1 scores.
pub fn rouge_avg(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
    RougeScores::compute(hyp, reference).avg
}
