use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sentence_groups, AssembledInput, TaggedTarget};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::layers::{causal_mask, normal, DecoderLayer, Dropout, EncoderLayer, LayerNorm};
use crate::tensor::{Adam, AdamConfig, Checkpoint, Graph, ParamId, ParamStore, Tensor, TrainReport, Var};

/// Where group-tag embeddings enter the encoder. The decoder always adds
/// them to its input embeddings unless tags are off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagPlacement {
    EncoderOutput,
    EncoderInput,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    /// Rows of the group-tag table (N).
    pub max_tags: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub tags: TagPlacement,
    pub seed: u64,
}

impl SummarizerConfig {
    pub fn new(vocab_size: usize) -> Self {
        SummarizerConfig {
            vocab_size,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            attn_heads: 4,
            d_ff: 256,
            max_tags: 32,
            max_source_len: 1024 + 2 + 768,
            max_target_len: 128,
            dropout: 0.1,
            tags: TagPlacement::EncoderOutput,
            seed: 23,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} attention heads",
                self.d_model, self.attn_heads
            ));
        }
        if self.max_tags < 2 {
            return bad(format!("max_tags {} must be at least 2", self.max_tags));
        }
        if self.max_target_len < 3 || self.max_source_len < 2 {
            return bad("length limits too small".into());
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

/// One teacher-forcing pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub input: AssembledInput,
    pub target: TaggedTarget,
}

/// Next-token distribution for the last prefix position plus last-layer
/// cross-attention averaged over heads, one row per prefix position.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub log_probs: Vec<f64>,
    pub cross_attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SummarizerModel {
    pub config: SummarizerConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    tag_emb: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
}

fn as_usize(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().map(|&t| t as usize).collect()
}

impl SummarizerModel {
    pub fn new(config: SummarizerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add("tok_emb", normal(&mut rng, config.vocab_size, d, 0.02));
        let src_pos = store.add("src_pos", normal(&mut rng, config.max_source_len, d, 0.02));
        let tgt_pos = store.add("tgt_pos", normal(&mut rng, config.max_target_len, d, 0.02));
        let tag_emb = store.add("tag_emb", normal(&mut rng, config.max_tags, d, 0.02));
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("enc{i}"), d, config.attn_heads, config.d_ff))
            .collect();
        let enc_ln = LayerNorm::new(&mut store, "enc_ln", d);
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayer::new(&mut store, &mut rng, &format!("dec{i}"), d, config.attn_heads, config.d_ff))
            .collect();
        let dec_ln = LayerNorm::new(&mut store, "dec_ln", d);
        Ok(SummarizerModel {
            config,
            store,
            tok_emb,
            src_pos,
            tgt_pos,
            tag_emb,
            encoder,
            enc_ln,
            decoder,
            dec_ln,
        })
    }

    pub fn tag_table(&self) -> ParamId {
        self.tag_emb
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.tok_emb
    }

    fn check_input(&self, input: &AssembledInput) -> Result<()> {
        if input.len() > self.config.max_source_len {
            return Err(Error::Config(format!(
                "input of {} tokens exceeds max_source_len {}",
                input.len(),
                self.config.max_source_len
            )));
        }
        assert!(
            input.group_tags.iter().all(|&t| t < self.config.max_tags),
            "group tag out of range"
        );
        Ok(())
    }

    /// Encoder states, `len × d_model`.
    pub fn encode_graph(&self, g: &mut Graph, input: &AssembledInput, drop: &mut Dropout) -> Result<Var> {
        self.check_input(input)?;
        let positions: Vec<usize> = (0..input.len()).collect();
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.src_pos);
        let x = g.embedding(tok, &as_usize(&input.ids))?;
        let p = g.embedding(pos, &positions)?;
        let mut h = g.add(x, p)?;
        if self.config.tags == TagPlacement::EncoderInput {
            let tags = g.param(self.tag_emb);
            let t = g.embedding(tags, &input.group_tags)?;
            h = g.add(h, t)?;
        }
        h = drop.apply(g, h);
        for layer in &self.encoder {
            h = layer.forward(g, h, drop)?;
        }
        h = self.enc_ln.forward(g, h)?;
        if self.config.tags == TagPlacement::EncoderOutput {
            let tags = g.param(self.tag_emb);
            let t = g.embedding(tags, &input.group_tags)?;
            h = g.add(h, t)?;
        }
        Ok(h)
    }

    /// Logits (`len × vocab`) for every prefix position and the last
    /// decoder layer's per-head cross-attention.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        memory: Var,
        prefix: &[TokenId],
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let n = prefix.len();
        if n == 0 || n > self.config.max_target_len {
            return Err(Error::Config(format!(
                "decoder prefix of {n} tokens outside 1..={}",
                self.config.max_target_len
            )));
        }
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.tgt_pos);
        let x = g.embedding(tok, &as_usize(prefix))?;
        let p = g.embedding(pos, &positions)?;
        let mut h = g.add(x, p)?;
        if self.config.tags != TagPlacement::Off {
            let tags = g.param(self.tag_emb);
            let gi = g.embedding(tags, &sentence_groups(prefix, self.config.max_tags))?;
            let g0 = g.embedding(tags, &vec![0; n])?;
            h = g.add(h, gi)?;
            h = g.add(h, g0)?;
        }
        h = drop.apply(g, h);
        let mask = causal_mask(n);
        let mut cross = Vec::new();
        for layer in &self.decoder {
            let (out, weights) = layer.forward(g, h, memory, &mask, drop)?;
            h = out;
            cross = weights;
        }
        h = self.dec_ln.forward(g, h)?;
        let logits = g.matmul_t(h, tok)?;
        Ok((logits, cross))
    }

    /// Mean token cross-entropy of `target` under teacher forcing.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        input: &AssembledInput,
        target: &TaggedTarget,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if target.ids.len() < 2 {
            return Err(Error::EmptyTarget);
        }
        let memory = self.encode_graph(g, input, drop)?;
        let n = target.ids.len() - 1;
        let (logits, _) = self.decode_graph(g, memory, &target.ids[..n], drop)?;
        g.cross_entropy(logits, &as_usize(&target.ids[1..]), Vocabulary::PAD as usize)
    }

    pub fn encode(&self, input: &AssembledInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let h = self.encode_graph(&mut g, input, &mut Dropout::off())?;
        Ok(g.value(h).clone())
    }

    pub fn decode_step(&self, memory: &Tensor, prefix: &[TokenId]) -> Result<DecodeOutput> {
        let mut g = Graph::new(&self.store);
        let mem = g.constant(memory.clone());
        let (logits, cross) = self.decode_graph(&mut g, mem, prefix, &mut Dropout::off())?;
        let t = g.value(logits);
        let last = t.row_slice(t.rows() - 1);
        let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + last.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let log_probs = last.iter().map(|v| v - lse).collect();

        let heads = cross.len() as f64;
        let k = memory.rows();
        let mut cross_attention = vec![vec![0.0; k]; prefix.len()];
        for w in &cross {
            let tw = g.value(*w);
            for (i, row) in cross_attention.iter_mut().enumerate() {
                for (acc, v) in row.iter_mut().zip(tw.row_slice(i)) {
                    *acc += v / heads;
                }
            }
        }
        Ok(DecodeOutput {
            log_probs,
            cross_attention,
        })
    }

    pub fn nll_loss(&self, input: &AssembledInput, target: &TaggedTarget) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let l = self.loss_graph(&mut g, input, target, &mut Dropout::off())?;
        Ok(g.value(l).item())
    }

    pub fn to_checkpoint(&self, fingerprint: &str, epoch: usize) -> Checkpoint {
        self.store.to_checkpoint(serde_json::json!({
            "kind": "summarizer",
            "config": self.config,
            "fingerprint": fingerprint,
            "epoch": epoch,
        }))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("summarizer") {
            return Err(Error::Checkpoint("not a summarizer checkpoint".into()));
        }
        let config: SummarizerConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let d = config.d_model;
        ckpt.ensure_fits(
            &[
                (config.vocab_size, d),
                (config.max_source_len, d),
                (config.max_target_len, d),
                (config.max_tags, d),
                (config.d_ff, d),
                (d, d),
            ],
            config.enc_layers + config.dec_layers,
        )?;
        let mut model = SummarizerModel::new(config)?;
        model.store.load_checkpoint(ckpt)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SummarizerTrainConfig {
    fn default() -> Self {
        SummarizerTrainConfig {
            epochs: 5,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 11,
        }
    }
}

/// Adam-with-warmup on the teacher-forced loss. `on_epoch` runs after every
/// epoch (1-based) and is where callers write checkpoints.
pub fn train_summarizer(
    model: &mut SummarizerModel,
    examples: &[TrainingExample],
    cfg: &SummarizerTrainConfig,
    on_epoch: &mut dyn FnMut(usize, &SummarizerModel) -> Result<()>,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop = Dropout::new(model.config.dropout, cfg.seed ^ 0xd20b);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            for &i in chunk {
                let ex = &examples[i];
                let grads = {
                    let mut g = Graph::new(&model.store);
                    let loss = model.loss_graph(&mut g, &ex.input, &ex.target, &mut drop)?;
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
        let mean = total / examples.len() as f64;
        log::info!("summarizer epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::summarizer::{assemble, Budgets};
    use crate::tensor::gradcheck::max_relative_error;

    fn config(tags: TagPlacement) -> SummarizerConfig {
        SummarizerConfig {
            vocab_size: 16,
            d_model: 8,
            enc_layers: 1,
            dec_layers: 1,
            attn_heads: 2,
            d_ff: 12,
            max_tags: 4,
            max_source_len: 24,
            max_target_len: 10,
            dropout: 0.0,
            tags,
            seed: 5,
        }
    }

    fn seq(sentences: &[&[TokenId]]) -> TokenSequence {
        let mut out = TokenSequence::default();
        for s in sentences {
            let start = out.ids.len();
            out.ids.extend_from_slice(s);
            out.sentence_spans.push((start, out.ids.len()));
        }
        out
    }

    fn sample() -> (AssembledInput, TaggedTarget) {
        let budgets = Budgets {
            max_tags: 4,
            ..Budgets::default()
        };
        let ex = seq(&[&[9, 10], &[11]]);
        let input = assemble(&seq(&[&[6, 7, 8]]), &[&ex], &budgets);
        let target = TaggedTarget::new(&seq(&[&[12, 13], &[14]]), 10, 4).unwrap();
        (input, target)
    }

    #[test]
    fn zero_tag_table_is_plain_encoder() {
        let (input, _) = sample();
        let mut tagged = SummarizerModel::new(config(TagPlacement::EncoderOutput)).unwrap();
        let tag = tagged.tag_table();
        tagged.store.value_mut(tag).data_mut().fill(0.0);
        let mut plain = tagged.clone();
        plain.config.tags = TagPlacement::Off;
        assert_eq!(tagged.encode(&input).unwrap(), plain.encode(&input).unwrap());
    }

    #[test]
    fn output_tags_are_position_local() {
        let (input, _) = sample();
        let m = SummarizerModel::new(config(TagPlacement::EncoderOutput)).unwrap();
        let mut other = input.clone();
        other.group_tags[6] = 3;
        let a = m.encode(&input).unwrap();
        let b = m.encode(&other).unwrap();
        assert_eq!(a.dims2(), (input.len(), 8));
        let tags = m.store.value(m.tag_table());
        for r in 0..input.len() {
            if r == 6 {
                for c in 0..8 {
                    let pre_a = a.row_slice(r)[c] - tags.row_slice(input.group_tags[r])[c];
                    let pre_b = b.row_slice(r)[c] - tags.row_slice(3)[c];
                    assert!((pre_a - pre_b).abs() < 1e-12);
                }
            } else {
                assert_eq!(a.row_slice(r), b.row_slice(r));
            }
        }
    }

    #[test]
    fn input_tags_change_everything() {
        let (input, _) = sample();
        let m = SummarizerModel::new(config(TagPlacement::EncoderInput)).unwrap();
        let mut other = input.clone();
        other.group_tags[6] = 3;
        let a = m.encode(&input).unwrap();
        let b = m.encode(&other).unwrap();
        assert_ne!(a.row_slice(0), b.row_slice(0));
    }

    #[test]
    fn logits_cover_vocabulary_and_attention_normalized() {
        let (input, _) = sample();
        let m = SummarizerModel::new(config(TagPlacement::EncoderOutput)).unwrap();
        let mem = m.encode(&input).unwrap();
        let out = m.decode_step(&mem, &[Vocabulary::BOS, 12, 3]).unwrap();
        assert_eq!(out.log_probs.len(), 16);
        let total: f64 = out.log_probs.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(out.cross_attention.len(), 3);
        for row in &out.cross_attention {
            assert_eq!(row.len(), input.len());
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_projection_is_tied() {
        let (input, _) = sample();
        let mut m = SummarizerModel::new(config(TagPlacement::EncoderOutput)).unwrap();
        let mem = m.encode(&input).unwrap();
        let prefix = [Vocabulary::BOS, 12];
        let before = m.decode_step(&mem, &prefix).unwrap();
        let d = m.config.d_model;
        let tok = m.token_embeddings();
        // Row 9 never appears in the prefix, so only the logit for 9 moves
        // (and the normalizer with it).
        let with_nine = m.decode_step(&mem, &[Vocabulary::BOS, 9]).unwrap();
        // A uniform shift of the row would vanish against the layer-normed
        // state, so perturb a single coordinate.
        m.store.value_mut(tok).data_mut()[9 * d] += 0.5;
        let after = m.decode_step(&mem, &prefix).unwrap();
        let shift: Vec<f64> = before
            .log_probs
            .iter()
            .zip(&after.log_probs)
            .map(|(a, b)| b - a)
            .collect();
        for (v, s) in shift.iter().enumerate() {
            if v != 9 {
                assert!((s - shift[0]).abs() < 1e-12);
            }
        }
        assert!((shift[9] - shift[0]).abs() > 1e-6);
        // The same row is the input embedding of token 9.
        let with_nine_after = m.decode_step(&mem, &[Vocabulary::BOS, 9]).unwrap();
        // With 9 in the prefix the decoder state moves too, so the non-9
        // logits no longer shift together.
        let moved: Vec<f64> = with_nine
            .log_probs
            .iter()
            .zip(&with_nine_after.log_probs)
            .map(|(a, b)| b - a)
            .collect();
        assert!((moved[3] - moved[4]).abs() > 1e-9);
        let vocab_sized = m
            .store
            .ids()
            .filter(|&id| m.store.value(id).shape().contains(&16))
            .count();
        assert_eq!(vocab_sized, 1);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        // With every token embedding zero, every logit is 0.
        let (input, target) = sample();
        let mut m = SummarizerModel::new(config(TagPlacement::EncoderOutput)).unwrap();
        let tok = m.token_embeddings();
        m.store.value_mut(tok).data_mut().fill(0.0);
        let l = m.nll_loss(&input, &target).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_model_gradients() {
        for tags in [TagPlacement::EncoderOutput, TagPlacement::EncoderInput] {
            let (input, target) = sample();
            let mut m = SummarizerModel::new(config(tags)).unwrap();
            let model = m.clone();
            let f = |g: &mut Graph| model.loss_graph(g, &input, &target, &mut Dropout::off());
            let err = max_relative_error(&mut m.store, &f, 1e-5).unwrap();
            assert!(err < 1e-4, "{tags:?}: relative error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (input, target) = sample();
        let m = SummarizerModel::new(config(TagPlacement::EncoderInput)).unwrap();
        let ck = Checkpoint::from_json(&m.to_checkpoint("f", 2).to_json()).unwrap();
        let back = SummarizerModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.nll_loss(&input, &target).unwrap(), m.nll_loss(&input, &target).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let (input, target) = sample();
        let examples = vec![TrainingExample {
            id: "a".into(),
            input,
            target,
        }];
        let cfg = SummarizerTrainConfig {
            epochs: 6,
            batch_size: 1,
            adam: AdamConfig {
                lr_max: 1e-2,
                warmup: 2,
                ..AdamConfig::default()
            },
            seed: 1,
        };
        let run = || {
            let mut m = SummarizerModel::new(config(TagPlacement::EncoderOutput)).unwrap();
            let mut epochs = Vec::new();
            let r = train_summarizer(&mut m, &examples, &cfg, &mut |e, _| {
                epochs.push(e);
                Ok(())
            })
            .unwrap();
            assert_eq!(epochs, vec![1, 2, 3, 4, 5, 6]);
            (r, m.to_checkpoint("x", 6).to_json())
        };
        let (r1, c1) = run();
        let (r2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(r1, r2);
        assert!(r1.epoch_losses.last().unwrap() < &r1.epoch_losses[0]);
    }
}
