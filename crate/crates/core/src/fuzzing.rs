//! Entry points shared by the fuzz targets under `fuzz/` and the seed
//! replay test. Each parses untrusted text and, when parsing succeeds,
//! checks that the value survives a serialize/parse round trip. Errors are
//! fine; panics are bugs.

use crate::corpus::{build_vocab, encode_corpus, Corpus, LengthCaps, Vocabulary};
use crate::jsonl;
use crate::pipeline::RunConfig;
use crate::retriever::{CandidatePool, ExemplarSet, RetrieverModel};
use crate::summarizer::SummarizerModel;
use crate::tensor::Checkpoint;

pub fn corpus_jsonl(text: &str) {
    let Ok(corpus) = Corpus::parse_jsonl(text) else {
        return;
    };
    let again = Corpus::parse_jsonl(&corpus.to_jsonl()).expect("rendered corpus parses");
    assert_eq!(again, corpus);
    if let Ok(vocab) = build_vocab(&corpus, 64) {
        let caps = LengthCaps {
            document: 32,
            summary: 32,
        };
        for r in encode_corpus(&corpus, &vocab, caps) {
            assert!(r.document.len() <= 32 && r.summary.len() <= 32);
            assert!(r.document.ids.iter().all(|&t| (t as usize) < vocab.len()));
        }
    }
}

pub fn vocab_table(text: &str) {
    let Ok(vocab) = Vocabulary::from_table(text) else {
        return;
    };
    let again = Vocabulary::from_table(&vocab.to_table()).expect("rendered table parses");
    assert_eq!(again.to_table(), vocab.to_table());
}

pub fn checkpoint_json(text: &str) {
    let Ok(ckpt) = Checkpoint::from_json(text) else {
        return;
    };
    if let Ok(m) = RetrieverModel::from_checkpoint(&ckpt) {
        assert_eq!(m.store.len(), ckpt.params.len());
    }
    if let Ok(m) = SummarizerModel::from_checkpoint(&ckpt) {
        assert_eq!(m.store.len(), ckpt.params.len());
    }
}

pub fn config_toml(text: &str) {
    let Ok(cfg) = RunConfig::from_toml(text) else {
        return;
    };
    let _ = cfg.validate();
    let again = RunConfig::from_toml(&cfg.to_toml()).expect("rendered config parses");
    assert_eq!(again.fingerprint(), cfg.fingerprint());
}

pub fn artifact_jsonl(text: &str) {
    if let Ok(sets) = jsonl::parse::<ExemplarSet>(text) {
        let again: Vec<ExemplarSet> = jsonl::parse(&jsonl::render(&sets)).expect("rendered sets parse");
        assert_eq!(again, sets);
    }
    if let Ok(pools) = jsonl::parse::<CandidatePool>(text) {
        let again: Vec<CandidatePool> = jsonl::parse(&jsonl::render(&pools)).expect("rendered pools parse");
        assert_eq!(again, pools);
    }
}
