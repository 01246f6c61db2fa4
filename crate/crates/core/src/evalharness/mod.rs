//! Evaluation protocols: exemplar quality per retriever, end-to-end ROUGE
//! of generated summaries, and the ablation suite.

pub mod ablation;
pub mod synth;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedRecord, TokenSequence};
use crate::decoder::{beam_search, CreditConfig};
use crate::error::{Error, Result};
use crate::metrics::{rouge_avg, RougeScores};
use crate::retriever::{ExemplarSet, KnowledgeBase, RetrievalMode};
use crate::summarizer::{input_for, Budgets, SummarizerModel};

pub use ablation::{ablation_suite, AblationArm};

/// Mean top-1 R̃ of one retriever, with the per-query values behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityColumn {
    pub mode: RetrievalMode,
    /// Query id and R̃(top-1 exemplar, gold summary), in query order.
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub columns: Vec<QualityColumn>,
}

impl QualityTable {
    pub fn column(&self, mode: RetrievalMode) -> Option<&QualityColumn> {
        self.columns.iter().find(|c| c.mode == mode)
    }

    /// Mean ×100 for `mode`.
    pub fn score(&self, mode: RetrievalMode) -> Option<f64> {
        self.column(mode).map(|c| c.mean * 100.0)
    }

    /// True when the oracle column is at least every other column on every
    /// query. Vacuously true without an oracle column.
    pub fn oracle_dominates(&self) -> bool {
        let Some(oracle) = self.column(RetrievalMode::Oracle) else {
            return true;
        };
        self.columns.iter().all(|c| {
            c.per_query
                .iter()
                .zip(&oracle.per_query)
                .all(|((_, v), (_, o))| o >= v)
        })
    }

    /// One row per retriever: `mode,mean` with the mean ×100.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("retriever,top1_rouge_avg\n");
        for c in &self.columns {
            let _ = writeln!(out, "{},{:.2}", c.mode, c.mean * 100.0);
        }
        out
    }
}

/// R̃ between each query's top-1 exemplar and its gold summary, averaged
/// over `queries`. Every query needs a non-empty exemplar set in each
/// retriever's results.
pub fn exemplar_quality(
    kb: &KnowledgeBase,
    queries: &[EncodedRecord],
    results: &[(RetrievalMode, &HashMap<String, ExemplarSet>)],
) -> Result<QualityTable> {
    let mut columns = Vec::with_capacity(results.len());
    for (mode, sets) in results {
        let mut per_query = Vec::with_capacity(queries.len());
        for q in queries {
            let set = sets.get(&q.id).ok_or_else(|| Error::MissingExemplars(q.id.clone()))?;
            let top = set
                .exemplars
                .first()
                .ok_or_else(|| Error::MissingExemplars(q.id.clone()))?;
            let summary = kb.summary_of(&top.id)?;
            per_query.push((q.id.clone(), rouge_avg(&summary.ids, &q.summary.ids)));
        }
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
        };
        columns.push(QualityColumn {
            mode: *mode,
            per_query,
            mean,
        });
    }
    Ok(QualityTable { columns })
}

/// Mean fraction of each query's exemplars that share its label in
/// `labels` (e.g. synthetic cluster ids). Queries without a set count as 0.
pub fn label_recall(
    queries: &[EncodedRecord],
    sets: &HashMap<String, ExemplarSet>,
    labels: &HashMap<String, usize>,
) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let total: f64 = queries
        .iter()
        .map(|q| {
            let Some(set) = sets.get(&q.id).filter(|s| !s.exemplars.is_empty()) else {
                return 0.0;
            };
            let want = labels.get(&q.id);
            let hits = set.ids().filter(|id| labels.get(*id) == want && want.is_some()).count();
            hits as f64 / set.exemplars.len() as f64
        })
        .sum();
    total / queries.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub id: String,
    pub scores: RougeScores,
}

/// Per-query ROUGE of one system plus the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: String,
    pub per_query: Vec<QueryScore>,
    pub mean: RougeScores,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    label: &'a str,
    fingerprint: &'a str,
    queries: usize,
    r1: f64,
    r2: f64,
    rl: f64,
    avg: f64,
}

fn x100(v: f64) -> f64 {
    (v * 10000.0).round() / 100.0
}

impl EvalReport {
    pub fn new(label: impl Into<String>, fingerprint: impl Into<String>, per_query: Vec<QueryScore>) -> Self {
        let mean = RougeScores::mean(per_query.iter().map(|q| &q.scores));
        EvalReport {
            label: label.into(),
            fingerprint: fingerprint.into(),
            per_query,
            mean,
        }
    }

    /// `id,r1,r2,rl,avg` with F1 scores ×100.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "r1", "r2", "rl", "avg"])?;
        for q in &self.per_query {
            let s = &q.scores;
            w.write_record([
                q.id.clone(),
                format!("{:.2}", s.r1.f1 * 100.0),
                format!("{:.2}", s.r2.f1 * 100.0),
                format!("{:.2}", s.rl.f1 * 100.0),
                format!("{:.2}", s.avg * 100.0),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aggregate F1 scores ×100, rounded to 2 decimals.
    pub fn summary_json(&self) -> String {
        let s = SummaryJson {
            label: &self.label,
            fingerprint: &self.fingerprint,
            queries: self.per_query.len(),
            r1: x100(self.mean.r1.f1),
            r2: x100(self.mean.r2.f1),
            rl: x100(self.mean.rl.f1),
            avg: x100(self.mean.avg),
        };
        let mut out = serde_json::to_string_pretty(&s).expect("summary serializes");
        out.push('\n');
        out
    }

    /// Writes `<label>.csv` and `<label>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{}.csv", self.label));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{}.json", self.label));
        std::fs::write(&json_path, self.summary_json()).map_err(|e| Error::io(&json_path, e))
    }
}

/// A generated summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub id: String,
    pub summary: TokenSequence,
}

/// Decodes every record in `queries` and scores it against its gold
/// summary. `exemplars = None` decodes from the document alone.
pub fn end_to_end_eval(
    model: &SummarizerModel,
    credit: &CreditConfig,
    queries: &[EncodedRecord],
    exemplars: Option<&HashMap<String, ExemplarSet>>,
    kb: &KnowledgeBase,
    budgets: &Budgets,
    label: &str,
    fingerprint: &str,
) -> Result<(EvalReport, Vec<Generated>)> {
    let mut per_query = Vec::with_capacity(queries.len());
    let mut outputs = Vec::with_capacity(queries.len());
    for q in queries {
        let input = input_for(q, exemplars, kb, budgets)?;
        let result = beam_search(model, &input, credit, false)?;
        per_query.push(QueryScore {
            id: q.id.clone(),
            scores: RougeScores::compute(&result.output.ids, &q.summary.ids),
        });
        outputs.push(Generated {
            id: q.id.clone(),
            summary: result.output,
        });
    }
    Ok((EvalReport::new(label, fingerprint, per_query), outputs))
}
