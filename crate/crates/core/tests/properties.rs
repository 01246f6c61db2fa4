use proptest::prelude::*;

use exsum::corpus::{Corpus, DocumentRecord, Split, TokenId, TokenSequence, Vocabulary};
use exsum::decoder::g_weight;
use exsum::fuzzing;
use exsum::retriever::{contrastive_loss, vote};
use exsum::summarizer::{assemble, Budgets, TaggedTarget};

fn sentences(max_sent: usize, max_len: usize) -> impl Strategy<Value = TokenSequence> {
    prop::collection::vec(prop::collection::vec(5u32..40, 1..=max_len), 1..=max_sent).prop_map(|ss| {
        let mut out = TokenSequence::default();
        for s in ss {
            let start = out.ids.len();
            out.ids.extend(s.into_iter().map(|t| t as TokenId));
            out.sentence_spans.push((start, out.ids.len()));
        }
        out
    })
}

fn score_table(n: usize, heads: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, heads), n)
}

proptest! {
    #[test]
    fn vote_ignores_candidate_order(
        scores in (1usize..12, 1usize..5).prop_flat_map(|(n, h)| score_table(n, h)),
        e in 1usize..6,
        rot in 0usize..12,
    ) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("c{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let a = vote(&refs, &scores, e);

        let k = rot % scores.len();
        let mut ids_r = refs.clone();
        ids_r.rotate_left(k);
        let mut scores_r = scores.clone();
        scores_r.rotate_left(k);
        let mut ids_rev = ids_r.clone();
        ids_rev.reverse();
        let mut scores_rev = scores_r.clone();
        scores_rev.reverse();

        prop_assert_eq!(&a, &vote(&ids_r, &scores_r, e));
        prop_assert_eq!(&a, &vote(&ids_rev, &scores_rev, e));
        prop_assert_eq!(a.len(), e.min(scores.len()));
        prop_assert!(a.windows(2).all(|w| w[0].votes >= w[1].votes));
    }

    #[test]
    fn contrastive_loss_moves_with_scores(
        pos in prop::collection::vec(-1.0f64..1.0, 1..4),
        neg in prop::collection::vec(-1.0f64..1.0, 0..6),
        bump in 0.01f64..0.5,
        tau in 0.05f64..2.0,
    ) {
        let base = contrastive_loss(&[pos.clone()], &[neg.clone()], tau);
        prop_assert!(base >= 0.0);

        let mut up = pos.clone();
        up[0] += bump;
        prop_assert!(contrastive_loss(&[up], &[neg.clone()], tau) <= base);

        if !neg.is_empty() {
            let mut worse = neg.clone();
            worse[0] += bump;
            prop_assert!(contrastive_loss(&[pos.clone()], &[worse], tau) >= base);
        }
    }

    #[test]
    fn credit_weight_is_monotone_and_bounded(l_s in 1usize..200, k in 0usize..1_000_000) {
        let (a, b) = (g_weight(k, l_s), g_weight(k + 1, l_s));
        prop_assert!(a <= b);
        prop_assert!((0.0..std::f64::consts::E).contains(&b));
        prop_assert_eq!(a == 0.0, k <= l_s);
    }

    #[test]
    fn credit_weight_without_gate_is_flat(k in 1usize..1_000_000) {
        prop_assert_eq!(g_weight(0, 0), 0.0);
        prop_assert_eq!(g_weight(k, 0), std::f64::consts::E);
    }

    #[test]
    fn assembled_input_bookkeeping(
        doc in sentences(4, 8),
        exemplars in prop::collection::vec(sentences(5, 6), 0..6),
        document in 1usize..20,
        per_exemplar in 1usize..16,
        exemplar_total in 0usize..40,
        max_tags in 2usize..6,
        count in 0usize..6,
    ) {
        let budgets = Budgets { document, per_exemplar, exemplar_total, max_tags, exemplars: count };
        let refs: Vec<&TokenSequence> = exemplars.iter().collect();
        let input = assemble(&doc, &refs, &budgets);

        prop_assert_eq!(input.ids.len(), input.group_tags.len());
        prop_assert!(input.ids.len() <= budgets.max_input_len());
        prop_assert!(input.group_tags.iter().all(|&t| t < max_tags));
        prop_assert!(input.exemplar_cls_positions.len() <= count.min(exemplars.len()));
        prop_assert_eq!(input.ids[0], Vocabulary::CLS);
        let doc_end = input.ids.iter().position(|&t| t == Vocabulary::SEP).unwrap();
        prop_assert_eq!(doc_end, doc.len().min(document) + 1);
        prop_assert!(input.group_tags[..=doc_end].iter().all(|&t| t == 0));
        for &p in &input.exemplar_cls_positions {
            prop_assert_eq!(input.ids[p], Vocabulary::CLS);
            prop_assert_eq!(input.group_tags[p], 0);
            prop_assert_eq!(input.group_tags[p + 1], 1);
        }
    }

    #[test]
    fn target_groups_follow_separators(summary in sentences(6, 5), max_len in 3usize..30, max_tags in 2usize..6) {
        let t = TaggedTarget::new(&summary, max_len, max_tags).unwrap();
        prop_assert!(t.ids.len() <= max_len);
        prop_assert_eq!(t.ids[0], Vocabulary::BOS);
        prop_assert_eq!(*t.ids.last().unwrap(), Vocabulary::EOS);
        prop_assert_eq!(t.groups.len(), t.ids.len());
        prop_assert!(t.groups.windows(2).all(|w| w[0] <= w[1]));
        let mut seps = 0;
        for (&id, &g) in t.ids.iter().zip(&t.groups) {
            prop_assert_eq!(g, (1 + seps).min(max_tags - 1));
            if id == Vocabulary::SEP {
                seps += 1;
            }
        }
    }

    #[test]
    fn corpus_jsonl_round_trips(
        texts in prop::collection::vec(("[a-z]{1,6}( [a-z]{1,6}){0,6} ?[.!?]?", "[A-Za-z ,.]{1,30}"), 1..6),
    ) {
        let records: Vec<DocumentRecord> = texts
            .into_iter()
            .enumerate()
            .map(|(i, (document, summary))| DocumentRecord {
                id: format!("d{i}"),
                split: if i % 2 == 0 { Split::Train } else { Split::Test },
                document,
                summary,
            })
            .collect();
        if let Ok(c) = Corpus::new(records) {
            prop_assert_eq!(Corpus::parse_jsonl(&c.to_jsonl()).unwrap(), c);
        }
    }

    #[test]
    fn parsers_survive_arbitrary_text(text in "\\PC{0,200}") {
        fuzzing::corpus_jsonl(&text);
        fuzzing::vocab_table(&text);
        fuzzing::checkpoint_json(&text);
        fuzzing::config_toml(&text);
        fuzzing::artifact_jsonl(&text);
    }
}
