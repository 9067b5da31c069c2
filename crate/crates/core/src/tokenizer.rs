//! WordPiece encoding and decoding against a [`Vocabulary`].
//!
//! Encoding is greedy longest-match-first: at each position of a word the
//! longest vocabulary piece wins; a word with no full segmentation (or one
//! longer than `max_chars`) becomes `[UNK]`. Decoding is best-effort — it is
//! lossy through `[UNK]` and case folding.

use crate::corpus::pre_tokenize;
use crate::vocab::Vocabulary;

/// Default per-word character limit before a word is mapped to `[UNK]`.
pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
}

/// Parallel token ids and piece strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// An encoded text: the token sequence plus, for each input word, the index
/// of its first piece (None if truncation dropped the word). The alignment
/// is what the tagger uses to pool word-level features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub tokens: TokenSequence,
    pub word_first_piece: Vec<Option<usize>>,
}

/// Greedy longest-match segmentation of a single word. Returns the piece
/// strings; `[UNK]` alone if the word has no full segmentation or exceeds
/// `max_chars` characters.
pub fn wordpiece_tokenize(word: &str, v: &Vocabulary, max_chars: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let unk = || vec![v.piece(v.unk_id()).expect("vocab has [UNK]").to_string()];
    if chars.is_empty() || chars.len() > max_chars {
        return unk();
    }

    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut matched: Option<String> = None;
        while end > start {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate = format!("{}{candidate}", v.continuation_prefix());
            }
            if v.contains(&candidate) {
                matched = Some(candidate);
                break;
            }
            end -= 1;
        }
        match matched {
            Some(p) => {
                pieces.push(p);
                start = end;
            }
            None => return unk(),
        }
    }
    pieces
}

/// Encodes pre-tokenized words as `[CLS] pieces [SEP]`, truncated from the
/// tail to `max_len` with the final `[SEP]` retained.
pub fn encode_words(words: &[String], v: &Vocabulary, max_len: usize) -> Encoding {
    assert!(max_len >= 2, "max_len must fit [CLS] and [SEP]");
    let cls = v.piece(v.cls_id()).unwrap().to_string();
    let sep = v.piece(v.sep_id()).unwrap().to_string();

    let mut pieces = vec![cls];
    let mut word_first_piece = Vec::with_capacity(words.len());
    for word in words {
        word_first_piece.push(Some(pieces.len()));
        pieces.extend(wordpiece_tokenize(word, v, DEFAULT_MAX_WORD_CHARS));
    }
    pieces.push(sep.clone());

    if pieces.len() > max_len {
        pieces.truncate(max_len - 1);
        pieces.push(sep);
        for slot in word_first_piece.iter_mut() {
            if slot.is_some_and(|i| i >= max_len - 1) {
                *slot = None;
            }
        }
    }

    let ids = pieces
        .iter()
        .map(|p| v.id_of(p).expect("piece came from this vocabulary"))
        .collect();
    Encoding {
        tokens: TokenSequence { ids, pieces },
        word_first_piece,
    }
}

/// Pre-tokenizes then encodes a sentence.
pub fn encode(text: &str, v: &Vocabulary, max_len: usize, lowercase: bool) -> Encoding {
    encode_words(&pre_tokenize(text, lowercase), v, max_len)
}

/// Joins pieces back into text: specials dropped, continuation pieces glued
/// to the previous piece, words separated by single spaces.
pub fn decode(ids: &[u32], v: &Vocabulary) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        let piece = v.piece(id).ok_or(TokenizerError::IdOutOfRange {
            id,
            vocab_size: v.len(),
        })?;
        if v.is_special_id(id) {
            continue;
        }
        if let Some(tail) = piece.strip_prefix(v.continuation_prefix()) {
            out.push_str(tail);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
    }
    Ok(out)
}

/// Fraction of words mapping to `[UNK]`; `content_only` restricts the
/// denominator to words of the language's script (at least one alphabetic
/// character), excluding punctuation and digit strings, which scripts
/// share. Returns None for an empty sample.
pub fn unk_rate(
    sentences: impl Iterator<Item = impl AsRef<str>>,
    v: &Vocabulary,
    lowercase: bool,
    content_only: bool,
) -> Option<f64> {
    let unk_piece = v.piece(v.unk_id()).unwrap().to_string();
    let mut total = 0u64;
    let mut unks = 0u64;
    for sentence in sentences {
        for word in pre_tokenize(sentence.as_ref(), lowercase) {
            if content_only && !word.chars().any(char::is_alphabetic) {
                continue;
            }
            total += 1;
            let pieces = wordpiece_tokenize(&word, v, DEFAULT_MAX_WORD_CHARS);
            if pieces.len() == 1 && pieces[0] == unk_piece {
                unks += 1;
            }
        }
    }
    (total > 0).then(|| unks as f64 / total as f64)
}
