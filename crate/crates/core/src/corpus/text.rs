use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};

/// A lowercased surface token and whether a sentence ends right after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub ends_sentence: bool,
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own. A sentence ends
/// after `.`, `!` or `?` when followed by whitespace or end of text.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();

    let flush = |current: &mut String, words: &mut Vec<Word>| {
        if !current.is_empty() {
            words.push(Word {
                text: std::mem::take(current),
                ends_sentence: false,
            });
        }
    };

    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            flush(&mut current, &mut words);
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            flush(&mut current, &mut words);
            let ends_sentence =
                is_terminal(c) && chars.peek().map_or(true, |next| next.is_whitespace());
            words.push(Word {
                text: c.to_lowercase().collect(),
                ends_sentence,
            });
        }
    }
    flush(&mut current, &mut words);
    words
}

/// Token ids plus half-open sentence ranges that partition `0..ids.len()`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub sentence_spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Single-sentence sequence over `ids`.
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        let sentence_spans = if ids.is_empty() {
            Vec::new()
        } else {
            vec![(0, ids.len())]
        };
        TokenSequence {
            ids,
            sentence_spans,
        }
    }

    /// Keeps the first `max_len` tokens, clipping sentence spans.
    pub fn truncated(&self, max_len: usize) -> TokenSequence {
        if self.ids.len() <= max_len {
            return self.clone();
        }
        let sentence_spans = self
            .sentence_spans
            .iter()
            .filter(|&&(start, _)| start < max_len)
            .map(|&(start, end)| (start, end.min(max_len)))
            .collect();
        TokenSequence {
            ids: self.ids[..max_len].to_vec(),
            sentence_spans,
        }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[TokenId]> {
        self.sentence_spans.iter().map(|&(s, e)| &self.ids[s..e])
    }

    /// Concatenates the given sentences (by index) in the order supplied.
    pub fn select_sentences(&self, indices: &[usize]) -> TokenSequence {
        let mut out = TokenSequence::default();
        for &i in indices {
            let (s, e) = self.sentence_spans[i];
            let start = out.ids.len();
            out.ids.extend_from_slice(&self.ids[s..e]);
            out.sentence_spans.push((start, out.ids.len()));
        }
        out
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.ids
    }
}

fn spans_of(words: &[Word]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, w) in words.iter().enumerate() {
        if w.ends_sentence {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < words.len() {
        spans.push((start, words.len()));
    }
    spans
}

/// Tokenizes `text` against `vocab`; unknown words map to `[UNK]`.
/// Sentence spans are computed on the full text and then clipped to
/// the first `max_len` tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let words = split_words(text);
    let full = TokenSequence {
        ids: words.iter().map(|w| vocab.id_or_unk(&w.text)).collect(),
        sentence_spans: spans_of(&words),
    };
    full.truncated(max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Corpus, DocumentRecord, Split};

    fn vocab_for(texts: &[&str]) -> Vocabulary {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| DocumentRecord {
                id: format!("r{i}"),
                split: Split::Train,
                document: t.to_string(),
                summary: "x".into(),
            })
            .collect();
        build_vocab(&Corpus::new(records).unwrap(), 1000).unwrap()
    }

    fn surfaces(words: &[Word]) -> Vec<&str> {
        words.iter().map(|w| w.text.as_str()).collect()
    }

    #[test]
    fn two_sentence_example() {
        let vocab = vocab_for(&["The cat. It sat."]);
        let seq = tokenize("The cat. It sat.", &vocab, 1024);
        assert_eq!(vocab.decode(&seq.ids), ["the", "cat", ".", "it", "sat", "."]);
        assert_eq!(seq.sentence_spans, [(0, 3), (3, 6)]);
    }

    #[test]
    fn truncates_to_max_len() {
        let text = (0..2000).map(|i| format!("w{}", i % 50)).collect::<Vec<_>>().join(" ");
        let vocab = vocab_for(&[&text]);
        let seq = tokenize(&text, &vocab, 1024);
        assert_eq!(seq.len(), 1024);
        assert_eq!(seq.sentence_spans, [(0, 1024)]);
    }

    #[test]
    fn empty_text() {
        let vocab = vocab_for(&["a"]);
        let seq = tokenize("", &vocab, 10);
        assert!(seq.is_empty());
        assert!(seq.sentence_spans.is_empty());
    }

    #[test]
    fn punctuation_splits_and_lowercases() {
        let words = split_words("Hello, WORLD!Again");
        assert_eq!(surfaces(&words), ["hello", ",", "world", "!", "again"]);
        // '!' is followed by a letter, so the text stays one sentence.
        assert!(words.iter().all(|w| !w.ends_sentence));
    }

    #[test]
    fn decimal_point_does_not_split() {
        let words = split_words("Pi is 3.14 today. Yes");
        assert_eq!(spans_of(&words), [(0, 7), (7, 8)]);
    }

    #[test]
    fn truncation_clips_spans() {
        let vocab = vocab_for(&["a b. c d. e f."]);
        let seq = tokenize("a b. c d. e f.", &vocab, 5);
        assert_eq!(seq.sentence_spans, [(0, 3), (3, 5)]);
    }

    #[test]
    fn oov_maps_to_unk() {
        let vocab = vocab_for(&["known words"]);
        let seq = tokenize("known stranger", &vocab, 10);
        assert_eq!(vocab.decode(&seq.ids), ["known", "[UNK]"]);
    }
}
