//! Beam search with ROUGE Credit: at every `interval`-th step and when a
//! beam finishes, its ranking score becomes average log-likelihood plus
//! `λ · ROUGE(beam, E_best) · g(k)`, where `E_best` is the exemplar whose
//! `[CLS]` position draws the most cross-attention.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{Measure, RougeScores, RougeVariant};
use crate::summarizer::{AssembledInput, SummarizerModel};

/// Which cross-attention rows are averaged when choosing `E_best`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSpan {
    /// The query position that produced the newest token.
    Current,
    /// Every decoder position so far.
    AllSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CreditConfig {
    pub beam_size: usize,
    /// Credit is gated off for steps `k <= start`.
    pub start: usize,
    pub interval: usize,
    pub lambda: f64,
    pub variant: RougeVariant,
    pub attention: AttentionSpan,
    /// `false` runs the plain length-normalized beam search.
    pub enabled: bool,
    /// Generated tokens allowed, `[EOS]` included.
    pub max_len: usize,
}

impl Default for CreditConfig {
    fn default() -> Self {
        CreditConfig {
            beam_size: 4,
            start: 4,
            interval: 6,
            lambda: 1.0,
            variant: RougeVariant::R1,
            attention: AttentionSpan::Current,
            enabled: true,
            max_len: 128,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.interval == 0 || self.max_len == 0 {
            return Err(Error::Config("beam size, credit interval and max length must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("credit weight {} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// `0` for `k <= l_s`, otherwise `exp(1 - l_s / k)`.
pub fn g_weight(k: usize, l_s: usize) -> f64 {
    if k <= l_s {
        0.0
    } else {
        (1.0 - l_s as f64 / k as f64).exp()
    }
}

/// Index of the exemplar whose `[CLS]` position has the largest mass in
/// `row`; ties go to the lowest index. `None` without exemplars.
pub fn argmax_exemplar(row: &[f64], cls_positions: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in cls_positions.iter().enumerate() {
        let v = row[p];
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// `E_best` from head-averaged cross-attention rows (one per decoder
/// position), using the last row or the mean of all rows.
pub fn select_best_exemplar(cross: &[Vec<f64>], cls_positions: &[usize], span: AttentionSpan) -> Option<usize> {
    let last = cross.last()?;
    match span {
        AttentionSpan::Current => argmax_exemplar(last, cls_positions),
        AttentionSpan::AllSteps => {
            let mut mean = vec![0.0; last.len()];
            for row in cross {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / cross.len() as f64;
                }
            }
            argmax_exemplar(&mean, cls_positions)
        }
    }
}

fn content(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| !Vocabulary::is_special(t)).collect()
}

/// `ROUGE(hyp, exemplar) · g(k)` with the configured variant's F1. Special
/// tokens in `hyp` are ignored.
pub fn rouge_credit(hyp: &[TokenId], exemplar: &[TokenId], k: usize, cfg: &CreditConfig) -> f64 {
    let gate = g_weight(k, cfg.start);
    if gate == 0.0 {
        return 0.0;
    }
    RougeScores::compute(&content(hyp), exemplar).get(cfg.variant, Measure::F1) * gate
}

/// The exemplar token spans inside an assembled input.
pub fn exemplar_tokens(input: &AssembledInput) -> Vec<&[TokenId]> {
    input
        .exemplar_cls_positions
        .iter()
        .map(|&p| {
            let start = p + 1;
            let len = input.ids[start..]
                .iter()
                .position(|&t| t == Vocabulary::SEP)
                .unwrap_or(input.ids.len() - start);
            &input.ids[start..start + len]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// `[BOS]` followed by generated tokens.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Last credit applied (before weighting by λ).
    pub credit: f64,
    pub e_best: Option<usize>,
    /// Ranking score at the last step.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated tokens, `[EOS]` included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn avg_log_prob(&self) -> f64 {
        self.log_prob / self.len().max(1) as f64
    }

    /// Generated content as a sequence, one sentence per `[SEP]`-delimited
    /// segment.
    pub fn to_sequence(&self) -> TokenSequence {
        let mut out = TokenSequence::default();
        let mut start = 0;
        for &t in &self.tokens[1..] {
            if t == Vocabulary::SEP || t == Vocabulary::EOS {
                if out.ids.len() > start {
                    out.sentence_spans.push((start, out.ids.len()));
                }
                start = out.ids.len();
                if t == Vocabulary::EOS {
                    break;
                }
            } else if !Vocabulary::is_special(t) {
                out.ids.push(t);
            }
        }
        if out.ids.len() > start {
            out.sentence_spans.push((start, out.ids.len()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub credit_applied: bool,
    pub beams: Vec<BeamHypothesis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub output: TokenSequence,
    pub best: BeamHypothesis,
    /// Final beam contents, best first.
    pub beams: Vec<BeamHypothesis>,
    pub trace: Vec<TraceStep>,
}

fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Tokens never proposed by the decoder.
fn blocked(t: TokenId) -> bool {
    t == Vocabulary::PAD || t == Vocabulary::CLS || t == Vocabulary::BOS
}

/// Length-normalized beam search with ROUGE Credit. Each live beam proposes
/// its `beam_size` most likely continuations; survivors are the top
/// `beam_size` by ranking score, ties broken by token ids.
pub fn beam_search(
    model: &SummarizerModel,
    input: &AssembledInput,
    cfg: &CreditConfig,
    trace: bool,
) -> Result<BeamResult> {
    cfg.validate()?;
    let memory = model.encode(input)?;
    let exemplars = exemplar_tokens(input);
    let credit_on = cfg.enabled && !exemplars.is_empty();
    let max_steps = cfg.max_len.min(model.config.max_target_len);

    let mut beams = vec![BeamHypothesis {
        tokens: vec![Vocabulary::BOS],
        log_prob: 0.0,
        credit: 0.0,
        e_best: None,
        score: 0.0,
        finished: false,
    }];
    let mut steps = Vec::new();

    for k in 1..=max_steps {
        let periodic = credit_on && k % cfg.interval == 0;
        let mut candidates: Vec<BeamHypothesis> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let out = model.decode_step(&memory, &beam.tokens)?;
            let e_best = if credit_on {
                select_best_exemplar(&out.cross_attention, &input.exemplar_cls_positions, cfg.attention)
            } else {
                None
            };
            let mut options: Vec<(TokenId, f64)> = out
                .log_probs
                .iter()
                .enumerate()
                .map(|(t, &lp)| (t as TokenId, lp))
                .filter(|&(t, _)| !blocked(t))
                .collect();
            options.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(t, lp) in options.iter().take(cfg.beam_size) {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                let finished = t == Vocabulary::EOS || k == max_steps;
                let mut hyp = BeamHypothesis {
                    tokens,
                    log_prob: beam.log_prob + lp,
                    credit: 0.0,
                    e_best,
                    score: 0.0,
                    finished,
                };
                hyp.score = hyp.avg_log_prob();
                if credit_on && (periodic || finished) {
                    let ex = exemplars[e_best.unwrap_or(0)];
                    hyp.credit = rouge_credit(&hyp.tokens, ex, k, cfg);
                    hyp.score += cfg.lambda * hyp.credit;
                }
                candidates.push(hyp);
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam_size);
        beams = candidates;
        if trace {
            steps.push(TraceStep {
                step: k,
                credit_applied: periodic,
                beams: beams.clone(),
            });
        }
        if beams.iter().all(|b| b.finished) {
            break;
        }
    }

    let best = beams[0].clone();
    Ok(BeamResult {
        output: best.to_sequence(),
        best,
        beams,
        trace: steps,
    })
}
