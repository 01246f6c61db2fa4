//! Run configuration and the pipeline stages behind the command-line tool.
//!
//! Every stage reads its inputs from and writes its artifacts to a work
//! directory with fixed subdirectories (`corpus/`, `retriever/`,
//! `exemplars/`, `summarizer/`, `reports/`). Each stage also writes a
//! manifest holding the run configuration and its fingerprint.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, build_vocab, encode_corpus, Corpus, EncodedRecord, LengthCaps, Split, Vocabulary};
use crate::decoder::{beam_search, CreditConfig};
use crate::error::{Error, Result};
use crate::evalharness::synth::{clustered_corpus, paraphrase_corpus, ParaphraseConfig, SynthConfig, SyntheticCorpus};
use crate::evalharness::{ablation_suite, end_to_end_eval, AblationArm, EvalReport, Generated};
use crate::jsonl;
use crate::retriever::{
    coarse_rank, retrieve, retrieve_oracle, retrieve_random, retrieve_tfidf, train_retriever, CandidatePool,
    ExemplarSet, KnowledgeBase, PoolConfig, RetrievalMode, RetrieverConfig, RetrieverModel, RetrieverTrainConfig,
};
use crate::summarizer::{
    build_examples, input_for, train_summarizer, Budgets, SummarizerConfig, SummarizerModel, SummarizerTrainConfig,
    TagPlacement, TrainingExample,
};
use crate::tensor::{AdamConfig, Checkpoint, TrainReport};

/// Where the summarizer's exemplars come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarSource {
    Dense,
    Tfidf,
    Random,
    Oracle,
    /// No exemplars: document-only inputs.
    None,
}

impl ExemplarSource {
    pub fn mode(self) -> Option<RetrievalMode> {
        match self {
            ExemplarSource::Dense => Some(RetrievalMode::Dense),
            ExemplarSource::Tfidf => Some(RetrievalMode::Tfidf),
            ExemplarSource::Random => Some(RetrievalMode::Random),
            ExemplarSource::Oracle => Some(RetrievalMode::Oracle),
            ExemplarSource::None => None,
        }
    }
}

impl From<RetrievalMode> for ExemplarSource {
    fn from(m: RetrievalMode) -> Self {
        match m {
            RetrievalMode::Dense => ExemplarSource::Dense,
            RetrievalMode::Tfidf => ExemplarSource::Tfidf,
            RetrievalMode::Random => ExemplarSource::Random,
            RetrievalMode::Oracle => ExemplarSource::Oracle,
        }
    }
}

impl fmt::Display for ExemplarSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode() {
            Some(m) => m.fmt(f),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for ExemplarSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(ExemplarSource::None);
        }
        s.parse::<RetrievalMode>().map(Into::into)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub vocab_cap: usize,
    /// Summary tokens kept at ingestion.
    pub summary_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            vocab_cap: 8000,
            summary_len: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub d_model: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    /// Similarity heads H.
    pub sim_heads: usize,
    pub dropout: f64,
    pub tau: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup: u64,
    pub fraction: f64,
    /// Exemplars per query (e).
    pub exemplars: usize,
    pub seed: u64,
    pub train_seed: u64,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let m = RetrieverConfig::new(0);
        let t = RetrieverTrainConfig::default();
        RetrieverSection {
            d_model: m.d_model,
            layers: m.layers,
            attn_heads: m.attn_heads,
            d_ff: m.d_ff,
            sim_heads: m.sim_heads,
            dropout: m.dropout,
            tau: t.tau,
            negatives: t.negatives,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_max: t.adam.lr_max,
            warmup: t.adam.warmup,
            fraction: t.fraction,
            exemplars: 5,
            seed: m.seed,
            train_seed: t.seed,
        }
    }
}

impl RetrieverSection {
    pub fn model_config(&self, vocab_size: usize, max_len: usize) -> RetrieverConfig {
        RetrieverConfig {
            vocab_size,
            d_model: self.d_model,
            layers: self.layers,
            attn_heads: self.attn_heads,
            d_ff: self.d_ff,
            sim_heads: self.sim_heads,
            max_len,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> RetrieverTrainConfig {
        RetrieverTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            negatives: self.negatives,
            tau: self.tau,
            adam: AdamConfig {
                lr_max: self.lr_max,
                warmup: self.warmup,
                ..AdamConfig::default()
            },
            fraction: self.fraction,
            seed: self.train_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerSection {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub tags: TagPlacement,
    /// Exemplar source for training and decoding.
    pub exemplars: ExemplarSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup: u64,
    pub seed: u64,
    pub train_seed: u64,
}

impl Default for SummarizerSection {
    fn default() -> Self {
        let m = SummarizerConfig::new(0);
        let t = SummarizerTrainConfig::default();
        SummarizerSection {
            d_model: m.d_model,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            attn_heads: m.attn_heads,
            d_ff: m.d_ff,
            max_target_len: m.max_target_len,
            dropout: m.dropout,
            tags: m.tags,
            exemplars: ExemplarSource::Dense,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_max: t.adam.lr_max,
            warmup: t.adam.warmup,
            seed: m.seed,
            train_seed: t.seed,
        }
    }
}

impl SummarizerSection {
    pub fn model_config(&self, vocab_size: usize, budgets: &Budgets) -> SummarizerConfig {
        SummarizerConfig {
            vocab_size,
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            attn_heads: self.attn_heads,
            d_ff: self.d_ff,
            max_tags: budgets.max_tags,
            max_source_len: budgets.max_input_len(),
            max_target_len: self.max_target_len,
            dropout: self.dropout,
            tags: self.tags,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> SummarizerTrainConfig {
        SummarizerTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr_max: self.lr_max,
                warmup: self.warmup,
                ..AdamConfig::default()
            },
            seed: self.train_seed,
        }
    }
}

/// Every hyperparameter of a run. Loaded from TOML; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for the random-exemplar baseline.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub pool: PoolConfig,
    pub retriever: RetrieverSection,
    pub budgets: Budgets,
    pub summarizer: SummarizerSection,
    pub decoder: CreditConfig,
    pub synth: SynthConfig,
    pub paraphrase: ParaphraseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            corpus: CorpusSection::default(),
            pool: PoolConfig::default(),
            retriever: RetrieverSection::default(),
            budgets: Budgets::default(),
            summarizer: SummarizerSection::default(),
            decoder: CreditConfig::default(),
            synth: SynthConfig::default(),
            paraphrase: ParaphraseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(input: &str) -> Result<Self> {
        toml::from_str(input).map_err(|e| {
            let line = e
                .span()
                .map(|s| input.as_bytes()[..s.start.min(input.len())].iter().filter(|&&b| b == b'\n').count() + 1)
                .unwrap_or(0);
            Error::parse(line, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sets one dotted key, e.g. `retriever.tau=0.2`. The value is parsed
    /// as a TOML value, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut root;
        for p in path {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section {p:?} in {key:?}")))?;
        }
        if !table.contains_key(*last) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        table.insert(last.to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// Checks every module precondition before work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpus.vocab_cap <= Vocabulary::RESERVED.len() {
            return bad(format!("vocab_cap {} leaves no room beyond reserved tokens", self.corpus.vocab_cap));
        }
        if self.pool.cap == 0 || self.pool.salient_sentences == 0 {
            return bad("pool cap and salient sentence count must be at least 1".into());
        }
        let r = &self.retriever;
        r.model_config(Vocabulary::RESERVED.len() + 1, self.budgets.document + 2).validate()?;
        if !(r.tau > 0.0) {
            return bad(format!("temperature {} must be positive", r.tau));
        }
        if r.exemplars == 0 {
            return bad("exemplar count must be at least 1".into());
        }
        if !(r.fraction > 0.0 && r.fraction <= 1.0) {
            return bad(format!("fraction {} outside (0, 1]", r.fraction));
        }
        if r.lr_max <= 0.0 || self.summarizer.lr_max <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.budgets.exemplars == 0 && self.summarizer.exemplars != ExemplarSource::None {
            return bad("budgets.exemplars is 0 but an exemplar source is set".into());
        }
        self.summarizer
            .model_config(Vocabulary::RESERVED.len() + 1, &self.budgets)
            .validate()?;
        self.decoder.validate()
    }

    /// Hex digest of the canonical serialized config.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

/// Tokenized corpus plus the knowledge base built from its train split.
pub struct Prepared {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub records: Vec<EncodedRecord>,
    pub kb: KnowledgeBase,
}

impl Prepared {
    pub fn new(corpus: Corpus, vocab: Vocabulary, cfg: &RunConfig) -> Result<Self> {
        let caps = LengthCaps {
            document: cfg.budgets.document,
            summary: cfg.corpus.summary_len,
        };
        let records = encode_corpus(&corpus, &vocab, caps);
        let kb = KnowledgeBase::from_records(&records)?;
        Ok(Prepared {
            corpus,
            vocab,
            records,
            kb,
        })
    }

    /// Builds the vocabulary from the whole corpus.
    pub fn from_corpus(corpus: Corpus, cfg: &RunConfig) -> Result<Self> {
        let vocab = build_vocab(&corpus, cfg.corpus.vocab_cap)?;
        Self::new(corpus, vocab, cfg)
    }

    pub fn split(&self, split: Split) -> Vec<EncodedRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }
}

/// Candidate pools for every train record.
pub fn train_pools(prep: &Prepared, cfg: &RunConfig) -> Result<Vec<CandidatePool>> {
    prep.records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| coarse_rank(r, &prep.kb, &cfg.pool))
        .collect()
}

pub fn fit_retriever(
    prep: &Prepared,
    pools: &[CandidatePool],
    cfg: &RunConfig,
) -> Result<(RetrieverModel, TrainReport)> {
    let max_len = cfg.budgets.document.max(cfg.corpus.summary_len) + 2;
    let mut model = RetrieverModel::new(cfg.retriever.model_config(prep.vocab.len(), max_len))?;
    let train = prep.split(Split::Train);
    let report = train_retriever(&mut model, &prep.kb, &train, pools, &cfg.retriever.train_config())?;
    Ok((model, report))
}

/// Exemplar sets for `queries` under `mode`, in query order. Dense
/// retrieval needs `model`.
pub fn retrieve_all(
    prep: &Prepared,
    queries: &[EncodedRecord],
    mode: RetrievalMode,
    model: Option<&RetrieverModel>,
    cfg: &RunConfig,
) -> Result<Vec<ExemplarSet>> {
    let e = cfg.retriever.exemplars;
    match mode {
        RetrievalMode::Dense => {
            let model = model.ok_or_else(|| Error::Config("dense retrieval needs a trained retriever".into()))?;
            let index = model.build_index(&prep.kb)?;
            queries
                .iter()
                .map(|q| retrieve(model, &index, q, &prep.kb, &cfg.pool, e))
                .collect()
        }
        RetrievalMode::Tfidf => queries.iter().map(|q| retrieve_tfidf(q, &prep.kb, e)).collect(),
        RetrievalMode::Random => queries
            .iter()
            .map(|q| retrieve_random(q, &prep.kb, e, cfg.seed))
            .collect(),
        RetrievalMode::Oracle => queries.iter().map(|q| retrieve_oracle(q, &prep.kb, e)).collect(),
    }
}

pub fn by_query(sets: Vec<ExemplarSet>) -> HashMap<String, ExemplarSet> {
    sets.into_iter().map(|s| (s.query_id.clone(), s)).collect()
}

/// Teacher-forcing examples for the train split.
pub fn summarizer_examples(
    prep: &Prepared,
    exemplars: Option<&HashMap<String, ExemplarSet>>,
    cfg: &RunConfig,
) -> Result<Vec<TrainingExample>> {
    build_examples(
        &prep.records,
        Split::Train,
        exemplars,
        &prep.kb,
        &cfg.budgets,
        cfg.summarizer.max_target_len,
    )
}

pub fn fit_summarizer(
    prep: &Prepared,
    examples: &[TrainingExample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(usize, &SummarizerModel) -> Result<()>,
) -> Result<(SummarizerModel, TrainReport)> {
    let mut model = SummarizerModel::new(cfg.summarizer.model_config(prep.vocab.len(), &cfg.budgets))?;
    let report = train_summarizer(&mut model, examples, &cfg.summarizer.train_config(), on_epoch)?;
    Ok((model, report))
}

/// The fixed work-directory layout.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub id: String,
    pub summary: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn corpus_file(&self) -> PathBuf {
        self.root.join("corpus/corpus.jsonl")
    }

    pub fn vocab_file(&self) -> PathBuf {
        self.root.join("corpus/vocab.tsv")
    }

    pub fn labels_file(&self) -> PathBuf {
        self.root.join("corpus/clusters.json")
    }

    pub fn pools_file(&self) -> PathBuf {
        self.root.join("retriever/pools.jsonl")
    }

    pub fn retriever_checkpoint(&self) -> PathBuf {
        self.root.join("retriever/checkpoint.json")
    }

    pub fn exemplar_file(&self, mode: RetrievalMode) -> PathBuf {
        self.root.join(format!("exemplars/{mode}.jsonl"))
    }

    pub fn summarizer_dir(&self) -> PathBuf {
        self.root.join("summarizer")
    }

    pub fn summarizer_checkpoint(&self) -> PathBuf {
        self.summarizer_dir().join("checkpoint.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { path, producer })
        }
    }

    /// Writes `<dir>/<name>.manifest.json`.
    pub fn write_manifest(&self, dir: &str, name: &str, cfg: &RunConfig) -> Result<()> {
        let m = Manifest {
            stage: name.to_string(),
            fingerprint: cfg.fingerprint(),
            config: cfg.clone(),
        };
        write_text(&self.root.join(dir).join(format!("{name}.manifest.json")), &to_json(&m))
    }

    pub fn save_corpus(&self, corpus: &Corpus, vocab: &Vocabulary, cfg: &RunConfig) -> Result<()> {
        write_text(&self.corpus_file(), &corpus.to_jsonl())?;
        write_text(&self.vocab_file(), &vocab.to_table())?;
        self.write_manifest("corpus", "corpus", cfg)
    }

    pub fn load_prepared(&self, cfg: &RunConfig) -> Result<Prepared> {
        let path = Self::require(self.corpus_file(), "ingest` or `synth-corpus")?;
        let corpus = corpus::ingest(&path)?;
        let vpath = Self::require(self.vocab_file(), "ingest` or `synth-corpus")?;
        let text = std::fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        Prepared::new(corpus, Vocabulary::from_table(&text)?, cfg)
    }

    pub fn load_retriever(&self) -> Result<RetrieverModel> {
        let path = Self::require(self.retriever_checkpoint(), "train-retriever")?;
        RetrieverModel::from_checkpoint(&load_checkpoint(&path)?)
    }

    pub fn load_exemplars(&self, mode: RetrievalMode) -> Result<HashMap<String, ExemplarSet>> {
        let path = Self::require(self.exemplar_file(mode), "retrieve")?;
        Ok(by_query(jsonl::read(&path)?))
    }

    pub fn load_summarizer(&self) -> Result<SummarizerModel> {
        let path = Self::require(self.summarizer_checkpoint(), "train-summarizer")?;
        SummarizerModel::from_checkpoint(&load_checkpoint(&path)?)
    }

    /// Cluster labels of a synthetic corpus, when present.
    pub fn load_labels(&self) -> Result<Option<HashMap<String, usize>>> {
        let path = self.labels_file();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_text(path, &ckpt.to_json())
}

/// Which synthetic corpus to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Clustered,
    Paraphrase,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clustered" => Ok(SynthKind::Clustered),
            "paraphrase" => Ok(SynthKind::Paraphrase),
            other => Err(Error::Config(format!("unknown synthetic corpus {other:?}"))),
        }
    }
}

pub fn stage_synth(wd: &Workdir, cfg: &RunConfig, kind: SynthKind) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let synth = match kind {
        SynthKind::Clustered => clustered_corpus(&cfg.synth)?,
        SynthKind::Paraphrase => paraphrase_corpus(&cfg.paraphrase)?,
    };
    let vocab = build_vocab(&synth.corpus, cfg.corpus.vocab_cap)?;
    wd.save_corpus(&synth.corpus, &vocab, cfg)?;
    let sorted: std::collections::BTreeMap<&String, &usize> = synth.clusters.iter().collect();
    write_text(&wd.labels_file(), &to_json(&sorted))?;
    Ok(synth)
}

pub fn stage_ingest(wd: &Workdir, cfg: &RunConfig, input: &Path) -> Result<Corpus> {
    cfg.validate()?;
    let corpus = corpus::ingest(input)?;
    let vocab = build_vocab(&corpus, cfg.corpus.vocab_cap)?;
    wd.save_corpus(&corpus, &vocab, cfg)?;
    let labels = wd.labels_file();
    if labels.exists() {
        std::fs::remove_file(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    Ok(corpus)
}

pub fn stage_train_retriever(wd: &Workdir, cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let prep = wd.load_prepared(cfg)?;
    let pools = train_pools(&prep, cfg)?;
    write_text(&wd.pools_file(), &jsonl::render(&pools))?;
    let (model, report) = fit_retriever(&prep, &pools, cfg)?;
    write_checkpoint(&wd.retriever_checkpoint(), &model.to_checkpoint(&cfg.fingerprint()))?;
    write_text(&wd.root.join("retriever/train_report.json"), &to_json(&report))?;
    wd.write_manifest("retriever", "retriever", cfg)?;
    Ok(report)
}

/// Retrieves for every record with a summary-bearing split (train and
/// test); train records never see their own summary.
pub fn stage_retrieve(wd: &Workdir, cfg: &RunConfig, mode: RetrievalMode) -> Result<Vec<ExemplarSet>> {
    cfg.validate()?;
    let prep = wd.load_prepared(cfg)?;
    let model = match mode {
        RetrievalMode::Dense => Some(wd.load_retriever()?),
        _ => None,
    };
    let sets = retrieve_all(&prep, &prep.records, mode, model.as_ref(), cfg)?;
    write_text(&wd.exemplar_file(mode), &jsonl::render(&sets))?;
    wd.write_manifest("exemplars", &mode.to_string(), cfg)?;
    Ok(sets)
}

fn exemplars_for(wd: &Workdir, cfg: &RunConfig) -> Result<Option<HashMap<String, ExemplarSet>>> {
    cfg.summarizer.exemplars.mode().map(|m| wd.load_exemplars(m)).transpose()
}

pub fn stage_train_summarizer(wd: &Workdir, cfg: &RunConfig, dump_input: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let prep = wd.load_prepared(cfg)?;
    let exemplars = exemplars_for(wd, cfg)?;
    let examples = summarizer_examples(&prep, exemplars.as_ref(), cfg)?;
    if dump_input {
        let inputs: Vec<_> = examples
            .iter()
            .map(|ex| serde_json::json!({ "id": ex.id, "input": ex.input }))
            .collect();
        write_text(&wd.summarizer_dir().join("inputs.jsonl"), &jsonl::render(&inputs))?;
    }
    let fp = cfg.fingerprint();
    let dir = wd.summarizer_dir();
    let mut on_epoch = |epoch: usize, model: &SummarizerModel| {
        write_checkpoint(&dir.join(format!("epoch-{epoch}.json")), &model.to_checkpoint(&fp, epoch))
    };
    let (model, report) = fit_summarizer(&prep, &examples, cfg, &mut on_epoch)?;
    write_checkpoint(&wd.summarizer_checkpoint(), &model.to_checkpoint(&fp, cfg.summarizer.epochs))?;
    write_text(&dir.join("train_report.json"), &to_json(&report))?;
    wd.write_manifest("summarizer", "summarizer", cfg)?;
    Ok(report)
}

/// Decodes the test split and writes `reports/<label>.summaries.jsonl`,
/// plus a per-step trace when `trace` is set.
pub fn stage_summarize(wd: &Workdir, cfg: &RunConfig, label: &str, trace: bool) -> Result<Vec<SummaryLine>> {
    cfg.validate()?;
    let prep = wd.load_prepared(cfg)?;
    let model = wd.load_summarizer()?;
    let exemplars = exemplars_for(wd, cfg)?;
    let mut lines = Vec::new();
    let mut traces = Vec::new();
    for q in prep.split(Split::Test) {
        let input = input_for(&q, exemplars.as_ref(), &prep.kb, &cfg.budgets)?;
        let result = beam_search(&model, &input, &cfg.decoder, trace)?;
        lines.push(SummaryLine {
            id: q.id.clone(),
            summary: prep.vocab.decode_text(&result.output.ids),
        });
        for step in result.trace {
            traces.push(serde_json::json!({ "id": q.id, "step": step }));
        }
    }
    let dir = wd.reports_dir();
    write_text(&dir.join(format!("{label}.summaries.jsonl")), &jsonl::render(&lines))?;
    if trace {
        write_text(&dir.join(format!("{label}.trace.jsonl")), &jsonl::render(&traces))?;
    }
    wd.write_manifest("reports", &format!("{label}.summaries"), cfg)?;
    Ok(lines)
}

/// Scores the trained summarizer on the test split and writes the report;
/// also writes the exemplar-quality table for every retrieved mode found.
pub fn stage_evaluate(wd: &Workdir, cfg: &RunConfig, label: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let prep = wd.load_prepared(cfg)?;
    let model = wd.load_summarizer()?;
    let exemplars = exemplars_for(wd, cfg)?;
    let test = prep.split(Split::Test);
    let (report, outputs) = end_to_end_eval(
        &model,
        &cfg.decoder,
        &test,
        exemplars.as_ref(),
        &prep.kb,
        &cfg.budgets,
        label,
        &cfg.fingerprint(),
    )?;
    let dir = wd.reports_dir();
    report.write(&dir)?;
    write_text(&dir.join(format!("{label}.summaries.jsonl")), &jsonl::render(&summary_lines(&prep, &outputs)))?;

    let mut found = Vec::new();
    for mode in [RetrievalMode::Random, RetrievalMode::Tfidf, RetrievalMode::Dense, RetrievalMode::Oracle] {
        if wd.exemplar_file(mode).exists() {
            found.push((mode, wd.load_exemplars(mode)?));
        }
    }
    if !found.is_empty() {
        let cols: Vec<_> = found.iter().map(|(m, s)| (*m, s)).collect();
        let table = crate::evalharness::exemplar_quality(&prep.kb, &test, &cols)?;
        write_text(&dir.join("exemplar_quality.csv"), &table.to_csv())?;
    }
    wd.write_manifest("reports", label, cfg)?;
    Ok(report)
}

/// Runs the ablation suite over `arms`, writing `reports/ablation-<arm>.*`
/// and a one-line-per-arm `reports/ablation.csv`. Each arm's exemplars are
/// read from `exemplars/`.
pub fn stage_ablate(wd: &Workdir, cfg: &RunConfig, arms: &[AblationArm]) -> Result<Vec<(AblationArm, EvalReport)>> {
    cfg.validate()?;
    let prep = wd.load_prepared(cfg)?;
    let mut exemplars = HashMap::new();
    for arm in arms {
        if let Some(mode) = arm.config(cfg).summarizer.exemplars.mode() {
            if !exemplars.contains_key(&mode) {
                exemplars.insert(mode, wd.load_exemplars(mode)?);
            }
        }
    }
    let dir = wd.summarizer_dir();
    let fp = cfg.fingerprint();
    let mut on_trained = |arm: AblationArm, model: &SummarizerModel| {
        let path = dir.join(format!("ablation-{arm}.json"));
        write_checkpoint(&path, &model.to_checkpoint(&fp, cfg.summarizer.epochs))
    };
    let reports = ablation_suite(&prep, cfg, arms, &exemplars, &mut on_trained)?;
    let reports_dir = wd.reports_dir();
    let mut table = String::from("arm,r1,r2,rl,avg\n");
    for (arm, report) in &reports {
        let mut named = report.clone();
        named.label = format!("ablation-{arm}");
        named.write(&reports_dir)?;
        let m = &report.mean;
        table.push_str(&format!(
            "{arm},{:.2},{:.2},{:.2},{:.2}\n",
            m.r1.f1 * 100.0,
            m.r2.f1 * 100.0,
            m.rl.f1 * 100.0,
            m.avg * 100.0
        ));
    }
    write_text(&reports_dir.join("ablation.csv"), &table)?;
    wd.write_manifest("reports", "ablation", cfg)?;
    Ok(reports)
}

fn summary_lines(prep: &Prepared, outputs: &[Generated]) -> Vec<SummaryLine> {
    outputs
        .iter()
        .map(|g| SummaryLine {
            id: g.id.clone(),
            summary: prep.vocab.decode_text(&g.summary.ids),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_eq!(cfg.retriever.tau, 0.1);
        assert_eq!(cfg.retriever.sim_heads, 16);
        assert_eq!(cfg.pool.cap, 100);
        assert_eq!(cfg.decoder.interval, 6);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("[retriever]\ntau = 0.2\n[decoder]\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.retriever.tau, 0.2);
        assert_eq!(cfg.retriever.sim_heads, 16);
        assert_eq!(cfg.decoder.lambda, 0.0);
        assert_ne!(cfg.fingerprint(), RunConfig::default().fingerprint());
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        match RunConfig::from_toml("seed = 3\n[retriever]\ntemperature = 0.2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("retriever.sim_heads", "4").unwrap();
        cfg.set("summarizer.tags", "off").unwrap();
        cfg.set("summarizer.exemplars", "\"none\"").unwrap();
        assert_eq!(cfg.retriever.sim_heads, 4);
        assert_eq!(cfg.summarizer.tags, TagPlacement::Off);
        assert_eq!(cfg.summarizer.exemplars, ExemplarSource::None);
        assert!(cfg.set("retriever.nope", "1").is_err());
        assert!(cfg.set("nope.tau", "1").is_err());
        assert!(cfg.set("retriever.tau", "\"x\"").is_err());
    }

    #[test]
    fn validation_catches_bad_heads() {
        let mut cfg = RunConfig::default();
        cfg.retriever.sim_heads = 7;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.decoder.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path());
        let cfg = RunConfig::default();
        match stage_train_retriever(&wd, &cfg) {
            Err(Error::MissingArtifact { producer, .. }) => assert!(producer.contains("synth-corpus")),
            other => panic!("expected missing artifact, got {other:?}"),
        }
        match wd.load_summarizer() {
            Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "train-summarizer"),
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }

    #[test]
    fn source_names() {
        for s in ["dense", "tfidf", "random", "oracle", "none"] {
            assert_eq!(s.parse::<ExemplarSource>().unwrap().to_string(), s);
        }
        assert!("bm25".parse::<ExemplarSource>().is_err());
    }
}
