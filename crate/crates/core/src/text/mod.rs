//! Tokenization, vocabulary, unigram sampling and batching.

mod vocab;

pub use vocab::{TokenId, UnigramDistribution, Vocabulary, CLS, MASK, PAD, SEP, SPECIALS, UNK};

use std::io::BufRead;

use crate::error::{Error, Result};

/// Lowercases, splits on whitespace and splits punctuation into standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Reads a one-sentence-per-line corpus; blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Vec<String>>> {
    let mut sentences = Vec::new();
    for line in reader.lines() {
        let toks = tokenize(&line?);
        if !toks.is_empty() {
            sentences.push(toks);
        }
    }
    Ok(sentences)
}

/// Vocabulary ids of one sentence, starting with CLS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Word index for every position; `None` for CLS.
    pub words: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Prepends CLS, maps OOV tokens to UNK and truncates to `max_len`.
pub fn encode_sequence<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::config(format!("max_len must be ≥ 2, got {max_len}")));
    }
    let mut ids = vec![Vocabulary::CLS];
    let mut words = vec![None];
    for (i, t) in tokens.iter().take(max_len - 1).enumerate() {
        ids.push(vocab.id(t.as_ref()));
        words.push(Some(i));
    }
    Ok(TokenSequence { ids, words })
}

/// Tokens for `ids`, skipping CLS and PAD.
pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != Vocabulary::CLS && id != Vocabulary::PAD)
        .map(|&id| vocab.token(id).unwrap_or(UNK).to_string())
        .collect()
}

/// Sequences padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<TokenId>>,
    /// `true` at PAD positions.
    pub padding: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    pub batches: usize,
    pub dropped_sequences: usize,
}

/// Groups sequences into padded batches; a short final batch is dropped.
pub fn make_batches(
    sequences: &[TokenSequence],
    batch_size: usize,
) -> Result<(Vec<Batch>, BatchStats)> {
    if batch_size < 2 {
        return Err(Error::config(
            "batch_size must be ≥ 2 for in-batch negatives",
        ));
    }
    let mut batches = Vec::new();
    let mut chunks = sequences.chunks_exact(batch_size);
    for chunk in &mut chunks {
        let width = chunk.iter().map(TokenSequence::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(batch_size);
        let mut padding = Vec::with_capacity(batch_size);
        let mut lengths = Vec::with_capacity(batch_size);
        for s in chunk {
            let mut row = s.ids.clone();
            row.resize(width, Vocabulary::PAD);
            let mask = (0..width).map(|i| i >= s.len()).collect();
            ids.push(row);
            padding.push(mask);
            lengths.push(s.len());
        }
        batches.push(Batch {
            ids,
            padding,
            lengths,
        });
    }
    let stats = BatchStats {
        batches: batches.len(),
        dropped_sequences: chunks.remainder().len(),
    };
    Ok((batches, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_cases() {
        assert_eq!(tokenize("The cat sat."), ["the", "cat", "sat", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  b"), ["a", "b"]);
        assert_eq!(tokenize("Hi,there!"), ["hi", ",", "there", "!"]);
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(tokenize("the cat sat on the mat"), 1).unwrap()
    }

    #[test]
    fn encode_cases() {
        let v = vocab();
        let s = encode_sequence(&["cat"], &v, 8).unwrap();
        assert_eq!(s.ids, vec![Vocabulary::CLS, v.id("cat")]);
        let s = encode_sequence(&["zebra"], &v, 8).unwrap();
        assert_eq!(s.ids, vec![Vocabulary::CLS, Vocabulary::UNK]);
        let long = vec!["cat"; 600];
        assert_eq!(encode_sequence(&long, &v, 512).unwrap().len(), 512);
        assert!(matches!(
            encode_sequence(&["cat"], &v, 1),
            Err(Error::Config(_))
        ));
    }

    fn seq(len: usize) -> TokenSequence {
        TokenSequence {
            ids: std::iter::once(Vocabulary::CLS)
                .chain(std::iter::repeat_n(7, len - 1))
                .collect(),
            words: (0..len).map(|i| i.checked_sub(1)).collect(),
        }
    }

    #[test]
    fn batches_pad_and_drop() {
        let (b, stats) = make_batches(&[seq(3), seq(5)], 2).unwrap();
        assert_eq!(b[0].width(), 5);
        assert_eq!(b[0].padding[0], vec![false, false, false, true, true]);
        assert_eq!(b[0].ids[0][3], Vocabulary::PAD);
        assert_eq!(stats.dropped_sequences, 0);

        let five: Vec<_> = (2..7).map(seq).collect();
        let (b, stats) = make_batches(&five, 2).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(stats.dropped_sequences, 1);
        assert!(make_batches(&five, 1).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in prop::collection::vec(0usize..6, 0..30)) {
            let v = vocab();
            let pool = ["the", "cat", "sat", "on", "mat", "the"];
            let toks: Vec<&str> = words.iter().map(|&i| pool[i]).collect();
            let s = encode_sequence(&toks, &v, 64).unwrap();
            prop_assert_eq!(decode(&s.ids, &v), toks);
        }

        #[test]
        fn padding_mask_marks_exactly_pads(lens in prop::collection::vec(2usize..12, 2..9)) {
            let seqs: Vec<_> = lens.iter().map(|&l| seq(l)).collect();
            let (batches, _) = make_batches(&seqs, 2).unwrap();
            for b in &batches {
                for (row, mask) in b.ids.iter().zip(&b.padding) {
                    for (id, pad) in row.iter().zip(mask) {
                        prop_assert_eq!(*id == Vocabulary::PAD, *pad);
                    }
                }
            }
        }
    }
}
