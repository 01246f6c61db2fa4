//! Ablation arms. Each arm is the base configuration with one module
//! removed; arms that change training get their own summarizer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{end_to_end_eval, EvalReport};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::pipeline::{fit_summarizer, summarizer_examples, ExemplarSource, Prepared, RunConfig};
use crate::retriever::{ExemplarSet, RetrievalMode};
use crate::summarizer::{SummarizerModel, TagPlacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    Full,
    NoGroupAlignment,
    NoCredit,
    NoRetrieval,
    NoDense,
    ConcatenateOnly,
}

impl AblationArm {
    pub const ALL: [AblationArm; 6] = [
        AblationArm::Full,
        AblationArm::NoGroupAlignment,
        AblationArm::NoCredit,
        AblationArm::NoRetrieval,
        AblationArm::NoDense,
        AblationArm::ConcatenateOnly,
    ];

    /// The arm's configuration derived from `base`.
    pub fn config(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            AblationArm::Full => {}
            AblationArm::NoGroupAlignment => cfg.summarizer.tags = TagPlacement::Off,
            AblationArm::NoCredit => cfg.decoder.lambda = 0.0,
            AblationArm::NoRetrieval => cfg.summarizer.exemplars = ExemplarSource::None,
            AblationArm::NoDense => cfg.summarizer.exemplars = ExemplarSource::Tfidf,
            AblationArm::ConcatenateOnly => {
                cfg.summarizer.tags = TagPlacement::Off;
                cfg.decoder.enabled = false;
            }
        }
        cfg
    }

    /// The arm whose trained summarizer this arm decodes with.
    pub fn trained_by(self) -> AblationArm {
        match self {
            AblationArm::NoCredit => AblationArm::Full,
            AblationArm::ConcatenateOnly => AblationArm::NoGroupAlignment,
            other => other,
        }
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationArm::Full => "full",
            AblationArm::NoGroupAlignment => "no-group-alignment",
            AblationArm::NoCredit => "no-credit",
            AblationArm::NoRetrieval => "no-retrieval",
            AblationArm::NoDense => "no-dense",
            AblationArm::ConcatenateOnly => "concatenate-only",
        })
    }
}

impl FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationArm::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm {s:?}")))
    }
}

/// Trains one summarizer per distinct training setup among `arms` and
/// evaluates every arm on the test split. `exemplars` must hold the sets
/// (train and test queries) of each retrieval mode an arm uses.
/// `on_trained` sees each freshly trained model.
pub fn ablation_suite(
    prep: &Prepared,
    base: &RunConfig,
    arms: &[AblationArm],
    exemplars: &HashMap<RetrievalMode, HashMap<String, ExemplarSet>>,
    on_trained: &mut dyn FnMut(AblationArm, &SummarizerModel) -> Result<()>,
) -> Result<Vec<(AblationArm, EvalReport)>> {
    base.validate()?;
    let test = prep.split(Split::Test);
    let mut models: HashMap<AblationArm, SummarizerModel> = HashMap::new();
    let mut reports = Vec::with_capacity(arms.len());
    for &arm in arms {
        let cfg = arm.config(base);
        let sets = match cfg.summarizer.exemplars.mode() {
            Some(m) => Some(
                exemplars
                    .get(&m)
                    .ok_or_else(|| Error::Config(format!("ablation arm {arm} needs {m} exemplars")))?,
            ),
            None => None,
        };
        let owner = arm.trained_by();
        if !models.contains_key(&owner) {
            let train_cfg = owner.config(base);
            let examples = summarizer_examples(prep, sets, &train_cfg)?;
            let (model, _) = fit_summarizer(prep, &examples, &train_cfg, &mut |_, _| Ok(()))?;
            on_trained(owner, &model)?;
            models.insert(owner, model);
        }
        let model = &models[&owner];
        let (report, _) = end_to_end_eval(
            model,
            &cfg.decoder,
            &test,
            sets,
            &prep.kb,
            &cfg.budgets,
            &arm.to_string(),
            &cfg.fingerprint(),
        )?;
        log::info!("ablation {arm}: R-avg {:.2}", report.mean.avg * 100.0);
        reports.push((arm, report));
    }
    Ok(reports)
}
