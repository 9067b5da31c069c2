//! Subword vocabularies: induction, extension, and the vocab.txt format.
//!
//! Induction is BPE-style greedy pair merging over a BERT-style initial
//! segmentation (first character plain, remaining characters prefixed with
//! the continuation marker), emitting WordPiece-format pieces. Extension
//! induces a candidate vocabulary from target-language counts, filters out
//! every piece that already exists in the base vocabulary, and appends the
//! survivors after the base pieces so that base token ids never move.
//!
//! Merge rule (also the contract for the brute-force test oracle):
//! - pair counts sum each word's count once per adjacent position,
//!   overlapping positions included;
//! - the merge applied is the pair with the highest count, ties broken
//!   toward the lexicographically smaller `(left, right)` string pair;
//! - merges are applied left-to-right without overlap within a word;
//! - the merged piece is `left + right` with the continuation prefix
//!   stripped from `right`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::corpus::WordCounts;

/// The required special tokens, in id order 0..5.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Continuation marker for non-word-initial pieces.
pub const CONTINUATION_PREFIX: &str = "##";

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error(
        "target size {requested} is too small: need at least {required} \
         ({specials} specials + {alphabet} alphabet pieces)"
    )]
    TargetSizeTooSmall {
        requested: usize,
        required: usize,
        specials: usize,
        alphabet: usize,
    },
    #[error("duplicate piece {piece:?} on line {line}")]
    DuplicatePiece { piece: String, line: usize },
    #[error("empty piece on line {line}")]
    EmptyPiece { line: usize },
    #[error("invalid UTF-8 on line {line}")]
    InvalidUtf8 { line: usize },
    #[error("special tokens missing or out of order: expected lines 1..=5 to be {expected:?}, found {found:?}")]
    MissingSpecials {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("vocab file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// An ordered piece list with id lookup. Ids are contiguous `0..len` and
/// equal each piece's position; the special tokens occupy the lowest ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    id_of: HashMap<String, u32>,
    n_specials: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered piece list, validating the
    /// special-token prefix and the no-duplicates invariant. Line numbers
    /// in errors are 1-based piece positions.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self, VocabError> {
        let found: Vec<String> = pieces.iter().take(SPECIAL_TOKENS.len()).cloned().collect();
        if found.len() < SPECIAL_TOKENS.len()
            || !found.iter().zip(SPECIAL_TOKENS.iter()).all(|(a, b)| a == b)
        {
            return Err(VocabError::MissingSpecials {
                expected: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
                found,
            });
        }
        let mut id_of = HashMap::with_capacity(pieces.len());
        for (i, piece) in pieces.iter().enumerate() {
            if piece.is_empty() {
                return Err(VocabError::EmptyPiece { line: i + 1 });
            }
            if id_of.insert(piece.clone(), i as u32).is_some() {
                return Err(VocabError::DuplicatePiece {
                    piece: piece.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Vocabulary {
            pieces,
            id_of,
            n_specials: SPECIAL_TOKENS.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.id_of.get(piece).copied()
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.id_of.contains_key(piece)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn specials(&self) -> &[String] {
        &self.pieces[..self.n_specials]
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        (id as usize) < self.n_specials
    }

    pub fn continuation_prefix(&self) -> &str {
        CONTINUATION_PREFIX
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn cls_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    /// Non-special ids, for random-replacement sampling during masking.
    pub fn first_content_id(&self) -> u32 {
        self.n_specials as u32
    }
}

/// Outcome of vocabulary induction: the vocabulary plus the ordered merge
/// log, kept for oracle comparison and run metadata.
#[derive(Debug, Clone)]
pub struct Induction {
    pub vocabulary: Vocabulary,
    pub merges: Vec<(String, String)>,
}

/// Bookkeeping for an extension: how many candidate pieces survived the
/// overlap filter and where they landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabExtension {
    pub base_size: usize,
    pub appended_pieces: Vec<String>,
}

impl VocabExtension {
    pub fn appended_count(&self) -> usize {
        self.appended_pieces.len()
    }
}

/// Splits a word into its initial segmentation: first character plain,
/// remaining characters continuation-prefixed.
fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{c}")
            }
        })
        .collect()
}

fn merge_symbols(left: &str, right: &str) -> String {
    let stripped = right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right);
    format!("{left}{stripped}")
}

/// Induces a WordPiece vocabulary of at most `target_size` pieces from word
/// counts: specials, then the character alphabet (initial and continuation
/// forms that occur), then merged pieces in merge order. Deterministic given
/// counts; stops early if no adjacent pair remains to merge.
pub fn induce_vocabulary(
    counts: &WordCounts,
    target_size: usize,
    specials: &[String],
) -> Result<Induction, VocabError> {
    // Word segmentations, in deterministic (BTreeMap) order.
    let mut segments: Vec<(Vec<String>, u64)> = counts
        .iter()
        .filter(|(w, _)| !w.is_empty())
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();

    let alphabet: std::collections::BTreeSet<String> = segments
        .iter()
        .flat_map(|(syms, _)| syms.iter().cloned())
        .collect();

    let required = specials.len() + alphabet.len();
    if target_size < required {
        return Err(VocabError::TargetSizeTooSmall {
            requested: target_size,
            required,
            specials: specials.len(),
            alphabet: alphabet.len(),
        });
    }

    let mut pieces: Vec<String> = specials.to_vec();
    pieces.extend(alphabet.iter().cloned());

    let mut merges = Vec::new();
    while pieces.len() < target_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, count) in &segments {
            for pair in syms.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // Highest count wins; ties prefer the lexicographically smaller
        // (left, right) pair. BTreeMap iteration is ascending, so strict
        // `>` keeps the smallest pair among equals.
        let Some((best_pair, _)) = pair_counts.iter().fold(None, |acc, (pair, &count)| {
            match acc {
                None => Some((pair.clone(), count)),
                Some((_, best)) if count > best => Some((pair.clone(), count)),
                acc => acc,
            }
        }) else {
            break;
        };

        let merged = merge_symbols(&best_pair.0, &best_pair.1);
        for (syms, _) in &mut segments {
            apply_merge(syms, &best_pair, &merged);
        }
        pieces.push(merged);
        merges.push(best_pair);
    }

    Ok(Induction {
        vocabulary: Vocabulary::from_pieces(pieces)?,
        merges,
    })
}

/// Replaces adjacent (left, right) occurrences left-to-right, no overlap.
fn apply_merge(syms: &mut Vec<String>, pair: &(String, String), merged: &str) {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    *syms = out;
}

/// The vocabulary extension: induce `new_size_goal` candidate pieces from
/// the target-language counts, drop every candidate already present in the
/// base vocabulary, and append the survivors. Base ids are unchanged;
/// appended ids are `base_size..base_size + appended_count`.
///
/// `new_size_goal` counts non-special pieces and is the pre-filter size;
/// the post-filter count is recorded in the returned [`VocabExtension`].
pub fn extend_vocabulary(
    base: &Vocabulary,
    target_counts: &WordCounts,
    new_size_goal: usize,
) -> Result<(Vocabulary, VocabExtension), VocabError> {
    let specials: Vec<String> = base.specials().to_vec();
    let candidate = induce_vocabulary(
        target_counts,
        new_size_goal.saturating_add(specials.len()),
        &specials,
    )?;

    let base_set: HashSet<&str> = base.pieces().iter().map(String::as_str).collect();
    let appended: Vec<String> = candidate
        .vocabulary
        .pieces()
        .iter()
        .skip(specials.len())
        .filter(|p| !base_set.contains(p.as_str()))
        .cloned()
        .collect();

    let mut pieces = base.pieces().to_vec();
    pieces.extend(appended.iter().cloned());
    let extended = Vocabulary::from_pieces(pieces)?;
    let extension = VocabExtension {
        base_size: base.len(),
        appended_pieces: appended,
    };
    Ok((extended, extension))
}

/// vocab.txt: UTF-8, LF, one piece per line, line index = token id.
pub fn save_vocab(v: &Vocabulary, path: impl AsRef<Path>) -> Result<(), VocabError> {
    let path = path.as_ref();
    let mut out = String::new();
    for piece in v.pieces() {
        out.push_str(piece);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| VocabError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary, VocabError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| VocabError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_vocab(&bytes)
}

/// Parses vocab.txt bytes; errors carry 1-based line numbers.
pub fn parse_vocab(bytes: &[u8]) -> Result<Vocabulary, VocabError> {
    let mut pieces = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        // A trailing LF produces one empty final chunk; ignore it.
        if line.is_empty() {
            continue;
        }
        let piece = std::str::from_utf8(line)
            .map_err(|_| VocabError::InvalidUtf8 { line: line_no })?;
        if pieces.len() + 1 < line_no {
            // An empty line appeared before this one.
            return Err(VocabError::EmptyPiece { line: pieces.len() + 1 });
        }
        pieces.push(piece.to_string());
    }
    Vocabulary::from_pieces(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_specials() -> Vec<String> {
        SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()
    }

    fn counts(entries: &[(&str, u64)]) -> WordCounts {
        entries
            .iter()
            .map(|(w, c)| (w.to_string(), *c))
            .collect()
    }

    #[test]
    fn induce_merges_highest_count_pair_first() {
        // Alphabet of {"aa":3, "ab":1} is {a, ##a, ##b}. Pair (a,##a) has
        // count 3 and beats (a,##b) with 1, so the first merged piece is
        // "aa".
        let c = counts(&[("aa", 3), ("ab", 1)]);
        let target = 5 + 3 + 1;
        let got = induce_vocabulary(&c, target, &default_specials()).unwrap();
        assert_eq!(got.vocabulary.len(), target);
        assert_eq!(got.vocabulary.pieces().last().unwrap(), "aa");
        assert_eq!(
            got.merges,
            vec![("a".to_string(), "##a".to_string())]
        );
    }

    #[test]
    fn induce_empty_counts_gives_only_specials() {
        let got = induce_vocabulary(&WordCounts::new(), 5, &default_specials()).unwrap();
        assert_eq!(got.vocabulary.len(), 5);
        assert_eq!(got.vocabulary.pieces(), default_specials().as_slice());
        assert!(got.merges.is_empty());
    }

    #[test]
    fn induce_alphabet_only_case() {
        let c = counts(&[("b", 1)]);
        // Nothing mergeable: result is 6 pieces even though 7 requested.
        let got = induce_vocabulary(&c, 7, &default_specials()).unwrap();
        assert_eq!(got.vocabulary.len(), 6);
        assert_eq!(got.vocabulary.piece(5), Some("b"));

        let err = induce_vocabulary(&c, 5, &default_specials()).unwrap_err();
        match err {
            VocabError::TargetSizeTooSmall { required, .. } => assert_eq!(required, 6),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tie_break_prefers_smaller_pair() {
        // "ba" and "bc" both have count 2; pairs (b,##a) and (b,##c) tie.
        // Alphabet is {b, ##a, ##c}; leave room for exactly one merge.
        let c = counts(&[("ba", 2), ("bc", 2)]);
        let got = induce_vocabulary(&c, 5 + 3 + 1, &default_specials()).unwrap();
        assert_eq!(got.merges, vec![("b".to_string(), "##a".to_string())]);
    }

    #[test]
    fn extend_appends_only_novel_pieces_in_order() {
        let mut pieces = default_specials();
        pieces.extend(["a", "b"].map(String::from));
        let base = Vocabulary::from_pieces(pieces).unwrap();

        // Candidates from "bc": alphabet {b, ##c}, merge "bc".
        let c = counts(&[("bc", 2)]);
        let (extended, ext) = extend_vocabulary(&base, &c, 3).unwrap();
        assert_eq!(ext.base_size, 7);
        assert_eq!(ext.appended_pieces, vec!["##c".to_string(), "bc".to_string()]);
        assert_eq!(extended.id_of("##c"), Some(7));
        assert_eq!(extended.id_of("bc"), Some(8));
        // Base ids unchanged.
        for (i, p) in base.pieces().iter().enumerate() {
            assert_eq!(extended.id_of(p), Some(i as u32));
        }
    }

    #[test]
    fn extend_with_full_overlap_appends_nothing() {
        let mut pieces = default_specials();
        pieces.extend(["a", "##a", "aa"].map(String::from));
        let base = Vocabulary::from_pieces(pieces).unwrap();
        // Candidates are exactly {a, ##a, aa}, all already in base.
        let c = counts(&[("aa", 5)]);
        let (extended, ext) = extend_vocabulary(&base, &c, 3).unwrap();
        assert_eq!(ext.appended_count(), 0);
        assert_eq!(extended, base);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let c = counts(&[("hello", 3), ("help", 2), ("world", 1)]);
        let induced = induce_vocabulary(&c, 40, &default_specials()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        save_vocab(&induced.vocabulary, &path).unwrap();
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(loaded, induced.vocabulary);

        // Re-save is byte-exact.
        let first = std::fs::read(&path).unwrap();
        save_vocab(&loaded, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn load_reports_duplicate_line() {
        let mut lines: Vec<String> = default_specials();
        lines.push("x".into()); // line 6
        lines.push("x".into()); // line 7, duplicate
        let bytes = format!("{}\n", lines.join("\n")).into_bytes();
        match parse_vocab(&bytes).unwrap_err() {
            VocabError::DuplicatePiece { piece, line } => {
                assert_eq!(piece, "x");
                assert_eq!(line, 7);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_empty_file_reports_missing_specials() {
        match parse_vocab(b"").unwrap_err() {
            VocabError::MissingSpecials { found, .. } => assert!(found.is_empty()),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_rejects_bad_utf8_with_line_number() {
        let mut bytes = format!("{}\n", default_specials().join("\n")).into_bytes();
        bytes.extend(b"ok\n");
        bytes.extend([0xFF, 0xFE, b'\n']);
        match parse_vocab(&bytes).unwrap_err() {
            VocabError::InvalidUtf8 { line } => assert_eq!(line, 7),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn induction_is_deterministic() {
        let c = counts(&[("abc", 4), ("abd", 2), ("bcd", 7), ("cab", 1)]);
        let a = induce_vocabulary(&c, 30, &default_specials()).unwrap();
        let b = induce_vocabulary(&c, 30, &default_specials()).unwrap();
        assert_eq!(a.vocabulary.pieces(), b.vocabulary.pieces());
        assert_eq!(a.merges, b.merges);
    }

    proptest! {
        // Filter soundness: appended pieces never overlap the base, and
        // base ids never move.
        #[test]
        fn extension_filter_soundness(
            base_words in proptest::collection::btree_map("[a-d]{1,4}", 1u64..20, 1..8),
            target_words in proptest::collection::btree_map("[c-f]{1,4}", 1u64..20, 1..8),
            goal in 1usize..40,
        ) {
            let base = induce_vocabulary(&base_words, 64, &default_specials());
            prop_assume!(base.is_ok());
            let base = base.unwrap().vocabulary;
            let result = extend_vocabulary(&base, &target_words, goal);
            prop_assume!(result.is_ok());
            let (extended, ext) = result.unwrap();

            for p in &ext.appended_pieces {
                prop_assert!(!base.contains(p));
            }
            for (i, p) in base.pieces().iter().enumerate() {
                prop_assert_eq!(extended.id_of(p), Some(i as u32));
            }
            prop_assert_eq!(extended.len(), base.len() + ext.appended_count());
        }
    }
}
