//! Siamese dense retriever: a shared transformer encoder read at `[CLS]`,
//! followed by separate query-side and candidate-side projection stacks.
//! Similarity is computed per head on contiguous slices of the projection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CandidatePool, KnowledgeBase};
use crate::corpus::{EncodedRecord, TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::layers::{normal, Dropout, EncoderLayer, LayerNorm, Linear};
use crate::tensor::{cosine, Adam, AdamConfig, Checkpoint, Graph, ParamId, ParamStore, TrainReport, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    /// Number of similarity heads H; `d_model` must be divisible by it.
    pub sim_heads: usize,
    /// Longest input including `[CLS]` and `[SEP]`.
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl RetrieverConfig {
    pub fn new(vocab_size: usize) -> Self {
        RetrieverConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            attn_heads: 4,
            d_ff: 256,
            sim_heads: 16,
            max_len: 1026,
            dropout: 0.1,
            seed: 17,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.sim_heads == 0 || self.d_model % self.sim_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} similarity heads",
                self.d_model, self.sim_heads
            ));
        }
        if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} attention heads",
                self.d_model, self.attn_heads
            ));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} leaves no room for content", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= Vocabulary::RESERVED.len() {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Candidate,
}

/// Three affine layers with residual connections around the first two.
#[derive(Debug, Clone)]
struct Projection {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl Projection {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Projection {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, d),
            l2: Linear::new(store, rng, &format!("{name}.l2"), d, d),
            l3: Linear::new(store, rng, &format!("{name}.l3"), d, d),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h);
        let h = drop.apply(g, h);
        let x = g.add(x, h)?;
        let h = self.l2.forward(g, x)?;
        let h = g.relu(h);
        let h = drop.apply(g, h);
        let x = g.add(x, h)?;
        self.l3.forward(g, x)
    }
}

#[derive(Debug, Clone)]
pub struct RetrieverModel {
    pub config: RetrieverConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    query_proj: Projection,
    cand_proj: Projection,
}

/// `[CLS] tokens [SEP]`, truncated to `max_len` in total.
fn framed(tokens: &[TokenId], max_len: usize) -> Vec<usize> {
    let keep = tokens.len().min(max_len - 2);
    std::iter::once(Vocabulary::CLS)
        .chain(tokens[..keep].iter().copied())
        .chain(std::iter::once(Vocabulary::SEP))
        .map(|t| t as usize)
        .collect()
}

impl RetrieverModel {
    pub fn new(config: RetrieverConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add("enc.tok_emb", normal(&mut rng, config.vocab_size, d, 0.02));
        let pos_emb = store.add("enc.pos_emb", normal(&mut rng, config.max_len, d, 0.02));
        let layers = (0..config.layers)
            .map(|i| {
                EncoderLayer::new(&mut store, &mut rng, &format!("enc.layer{i}"), d, config.attn_heads, config.d_ff)
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "enc.final_ln", d);
        let query_proj = Projection::new(&mut store, &mut rng, "proj.query", d);
        let cand_proj = Projection::new(&mut store, &mut rng, "proj.candidate", d);
        Ok(RetrieverModel {
            config,
            store,
            tok_emb,
            pos_emb,
            layers,
            final_ln,
            query_proj,
            cand_proj,
        })
    }

    /// Projected `[CLS]` representation (`1 × d_model`) of one sequence.
    pub fn encode(&self, g: &mut Graph, tokens: &[TokenId], side: Side, drop: &mut Dropout) -> Result<Var> {
        let ids = framed(tokens, self.config.max_len);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let x = g.embedding(tok, &ids)?;
        let p = g.embedding(pos, &positions)?;
        let mut h = g.add(x, p)?;
        h = drop.apply(g, h);
        for layer in &self.layers {
            h = layer.forward(g, h, drop)?;
        }
        h = self.final_ln.forward(g, h)?;
        let cls = g.slice_rows(h, 0, 1)?;
        match side {
            Side::Query => self.query_proj.forward(g, cls, drop),
            Side::Candidate => self.cand_proj.forward(g, cls, drop),
        }
    }

    /// Inference-mode representation as a plain vector.
    pub fn represent(&self, tokens: &[TokenId], side: Side) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v = self.encode(&mut g, tokens, side, &mut Dropout::off())?;
        Ok(g.value(v).data().to_vec())
    }

    /// Candidate-side representations of every knowledge-base summary.
    pub fn build_index(&self, kb: &KnowledgeBase) -> Result<DenseIndex> {
        let reprs = kb
            .entries()
            .iter()
            .map(|e| self.represent(&e.summary, Side::Candidate))
            .collect::<Result<_>>()?;
        Ok(DenseIndex { reprs })
    }

    /// Multi-head contrastive loss of one query against its positives and
    /// negatives.
    pub fn item_loss(
        &self,
        g: &mut Graph,
        query: &[TokenId],
        positives: &[&TokenSequence],
        negatives: &[&TokenSequence],
        tau: f64,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let q = self.encode(g, query, Side::Query, drop)?;
        let mut cands = Vec::with_capacity(positives.len() + negatives.len());
        for c in positives.iter().chain(negatives) {
            cands.push(self.encode(g, c, Side::Candidate, drop)?);
        }
        let c = g.concat_rows(&cands)?;
        let scores = head_cosines(g, q, c, self.config.sim_heads)?;
        let p = positives.len();
        let n = cands.len();
        let sp = g.slice_rows(scores, 0, p)?;
        let sp = g.transpose(sp);
        let sn = g.slice_rows(scores, p, n)?;
        let sn = g.transpose(sn);
        g.contrastive(sp, sn, tau)
    }

    pub fn to_checkpoint(&self, fingerprint: &str) -> Checkpoint {
        self.store.to_checkpoint(serde_json::json!({
            "kind": "retriever",
            "config": self.config,
            "fingerprint": fingerprint,
        }))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("retriever") {
            return Err(Error::Checkpoint("not a retriever checkpoint".into()));
        }
        let config: RetrieverConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let d = config.d_model;
        ckpt.ensure_fits(
            &[(config.vocab_size, d), (config.max_len, d), (config.d_ff, d), (d, d)],
            config.layers,
        )?;
        let mut model = RetrieverModel::new(config)?;
        model.store.load_checkpoint(ckpt)?;
        Ok(model)
    }
}

/// Per-head cosine similarities between `q` (`1×d`) and each row of
/// `cands` (`n×d`), as an `n×H` matrix.
pub fn head_cosines(g: &mut Graph, q: Var, cands: Var, heads: usize) -> Result<Var> {
    let d = g.value(q).cols();
    let n = g.value(cands).rows();
    let dh = d / heads;
    let qh = g.reshape(q, heads, dh)?;
    let qh = g.l2_normalize_rows(qh);
    let ch = g.reshape(cands, n * heads, dh)?;
    let ch = g.l2_normalize_rows(ch);
    let qrep = g.repeat_rows(qh, n);
    let prod = g.mul(ch, qrep)?;
    let s = g.row_sum(prod);
    g.reshape(s, n, heads)
}

/// Cosine per contiguous block of `len / heads` values. Zero-norm blocks
/// score 0.
pub fn head_similarities(query: &[f64], cand: &[f64], heads: usize) -> Vec<f64> {
    let dh = query.len() / heads;
    (0..heads)
        .map(|h| {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (a, b) = (&query[s..e], &cand[s..e]);
            if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
                log::debug!("zero-norm slice in similarity head {h}");
            }
            cosine(a, b)
        })
        .collect()
}

/// Summed multi-head InfoNCE over plain score tables (`pos[h][j]`,
/// `neg[h][i]`), stabilized by max subtraction.
pub fn contrastive_loss(pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    pos.iter()
        .enumerate()
        .map(|(h, ps)| {
            let negs = neg.get(h).map(Vec::as_slice).unwrap_or(&[]);
            ps.iter()
                .map(|&s| {
                    let a = s / tau;
                    let m = negs.iter().map(|n| n / tau).fold(a, f64::max);
                    let z: f64 = (a - m).exp() + negs.iter().map(|n| (n / tau - m).exp()).sum::<f64>();
                    m + z.ln() - a
                })
                .sum::<f64>()
        })
        .sum()
}

/// Candidate-side vectors aligned with [`KnowledgeBase::entries`].
#[derive(Debug, Clone)]
pub struct DenseIndex {
    reprs: Vec<Vec<f64>>,
}

impl DenseIndex {
    pub fn get(&self, kb_index: usize) -> &[f64] {
        &self.reprs[kb_index]
    }

    pub fn len(&self) -> usize {
        self.reprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reprs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives sampled per query from the non-positive pool members.
    pub negatives: usize,
    pub tau: f64,
    pub adam: AdamConfig,
    /// Fraction of the available pools used for training.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            epochs: 2,
            batch_size: 16,
            negatives: 16,
            tau: 0.1,
            adam: AdamConfig::default(),
            fraction: 1.0,
            seed: 7,
        }
    }
}

/// Contrastive training over labeled candidate pools. `queries` supplies the
/// document of each pool's query (matched by id).
pub fn train_retriever(
    model: &mut RetrieverModel,
    kb: &KnowledgeBase,
    queries: &[EncodedRecord],
    pools: &[CandidatePool],
    cfg: &RetrieverTrainConfig,
) -> Result<TrainReport> {
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!("temperature {} must be positive", cfg.tau)));
    }
    let by_id: std::collections::HashMap<&str, &EncodedRecord> =
        queries.iter().map(|q| (q.id.as_str(), q)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut usable: Vec<&CandidatePool> = pools
        .iter()
        .filter(|p| p.candidates.iter().any(|c| c.positive))
        .collect();
    if usable.is_empty() {
        return Err(Error::NoPositives);
    }
    usable.shuffle(&mut rng);
    let keep = ((usable.len() as f64 * cfg.fraction).ceil() as usize).clamp(1, usable.len());
    usable.truncate(keep);

    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut drop = Dropout::new(model.config.dropout, cfg.seed ^ 0x5eed);
    let mut report = TrainReport::default();
    let batch = cfg.batch_size.max(1);

    for _epoch in 0..cfg.epochs {
        usable.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in usable.chunks(batch) {
            for pool in chunk {
                let query = by_id.get(pool.query_id.as_str()).ok_or_else(|| {
                    Error::Config(format!("pool query {:?} not among queries", pool.query_id))
                })?;
                let positives: Vec<&TokenSequence> = pool
                    .candidates
                    .iter()
                    .filter(|c| c.positive)
                    .map(|c| kb.summary_of(&c.id))
                    .collect::<Result<_>>()?;
                let mut negatives: Vec<&TokenSequence> = pool
                    .candidates
                    .iter()
                    .filter(|c| !c.positive)
                    .map(|c| kb.summary_of(&c.id))
                    .collect::<Result<_>>()?;
                if negatives.len() > cfg.negatives {
                    negatives.partial_shuffle(&mut rng, cfg.negatives);
                    negatives.truncate(cfg.negatives);
                }
                let grads = {
                    let mut g = Graph::new(&model.store);
                    let loss = model.item_loss(&mut g, &query.document, &positives, &negatives, cfg.tau, &mut drop)?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::NonFinite(value));
                    }
                    total += value;
                    let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                    g.backward(scaled)?
                };
                model.store.accumulate(&grads);
            }
            adam.step(&mut model.store)?;
        }
        let mean = total / usable.len() as f64;
        log::info!("retriever epoch {}: mean loss {mean:.5}", report.epoch_losses.len() + 1);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::tensor::gradcheck::max_relative_error;

    fn tiny(seed: u64) -> RetrieverModel {
        RetrieverModel::new(RetrieverConfig {
            vocab_size: 20,
            d_model: 8,
            layers: 1,
            attn_heads: 2,
            d_ff: 16,
            sim_heads: 4,
            max_len: 12,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    fn seq(ids: &[TokenId]) -> TokenSequence {
        TokenSequence::from_ids(ids.to_vec())
    }

    #[test]
    fn config_validation() {
        let mut c = RetrieverConfig::new(100);
        assert!(c.validate().is_ok());
        c.sim_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn graph_cosines_match_plain_route() {
        let m = tiny(1);
        let q = m.represent(&[6, 7, 8], Side::Query).unwrap();
        let cands = [seq(&[9, 10]), seq(&[11, 12, 13, 6])];
        let mut g = Graph::new(&m.store);
        let qv = g.constant(crate::tensor::Tensor::row(q.clone()));
        let cvs: Vec<Var> = cands
            .iter()
            .map(|c| m.encode(&mut g, c, Side::Candidate, &mut Dropout::off()).unwrap())
            .collect();
        let cv = g.concat_rows(&cvs).unwrap();
        let s = head_cosines(&mut g, qv, cv, 4).unwrap();
        let t = g.value(s).clone();
        for (i, c) in cands.iter().enumerate() {
            let plain = head_similarities(&q, &m.represent(c, Side::Candidate).unwrap(), 4);
            for (a, b) in t.row_slice(i).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sides_use_distinct_projections() {
        let m = tiny(2);
        let a = m.represent(&[6, 7], Side::Query).unwrap();
        let b = m.represent(&[6, 7], Side::Candidate).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn plateau_when_all_candidates_identical() {
        // Identical candidate sequences give identical scores on every head,
        // so each of the H·P terms is ln(1 + N).
        let m = tiny(3);
        let c = seq(&[9, 10, 11]);
        let pos = vec![&c; 3];
        let neg = vec![&c; 5];
        let mut g = Graph::new(&m.store);
        let l = m.item_loss(&mut g, &[6, 7], &pos, &neg, 0.1, &mut Dropout::off()).unwrap();
        let expected = 4.0 * 3.0 * 6f64.ln();
        assert!((g.value(l).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn item_loss_matches_plain_loss() {
        let m = tiny(4);
        let q = m.represent(&[6, 7, 8], Side::Query).unwrap();
        let pos = [seq(&[9]), seq(&[10, 11])];
        let neg = [seq(&[12, 13]), seq(&[14]), seq(&[6, 15])];
        let table = |xs: &[TokenSequence]| -> Vec<Vec<f64>> {
            let per: Vec<Vec<f64>> = xs
                .iter()
                .map(|c| head_similarities(&q, &m.represent(c, Side::Candidate).unwrap(), 4))
                .collect();
            (0..4).map(|h| per.iter().map(|s| s[h]).collect()).collect()
        };
        let plain = contrastive_loss(&table(&pos), &table(&neg), 0.1);
        let mut g = Graph::new(&m.store);
        let pr: Vec<&TokenSequence> = pos.iter().collect();
        let nr: Vec<&TokenSequence> = neg.iter().collect();
        let l = m.item_loss(&mut g, &[6, 7, 8], &pr, &nr, 0.1, &mut Dropout::off()).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-9);
    }

    #[test]
    fn item_loss_gradients() {
        let mut m = tiny(5);
        let model = m.clone();
        let pos = [seq(&[9, 10])];
        let neg = [seq(&[12]), seq(&[6, 15])];
        let f = |g: &mut Graph| {
            let pr: Vec<&TokenSequence> = pos.iter().collect();
            let nr: Vec<&TokenSequence> = neg.iter().collect();
            model.item_loss(g, &[6, 7], &pr, &nr, 1.0, &mut Dropout::off())
        };
        let err = max_relative_error(&mut m.store, &f, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(6);
        let json = m.to_checkpoint("abc").to_json();
        let back = RetrieverModel::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(
            back.represent(&[6, 7], Side::Query).unwrap(),
            m.represent(&[6, 7], Side::Query).unwrap()
        );
    }

    #[test]
    fn training_needs_positives() {
        let mut m = tiny(7);
        let recs = vec![EncodedRecord {
            id: "a".into(),
            split: Split::Train,
            document: seq(&[6]),
            summary: seq(&[7]),
        }];
        let kb = KnowledgeBase::from_records(&recs).unwrap();
        let pools = vec![CandidatePool {
            query_id: "a".into(),
            candidates: vec![],
        }];
        let err = train_retriever(&mut m, &kb, &recs, &pools, &RetrieverTrainConfig::default());
        assert!(matches!(err, Err(Error::NoPositives)));
    }
}
