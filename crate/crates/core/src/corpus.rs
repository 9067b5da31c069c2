//! Raw text ingestion and pre-tokenization.
//!
//! The pre-tokenizer mirrors the classic BERT "basic tokenizer": control and
//! zero-width characters are stripped, CJK ideographs are isolated, text is
//! split on whitespace, optionally case-folded with combining accents removed
//! after canonical decomposition, and punctuation is split into
//! single-character words. Its output words are the units consumed by
//! vocabulary induction and WordPiece tokenization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use unicode_normalization::char::{decompose_canonical, is_combining_mark};
use unicode_properties::{GeneralCategory, GeneralCategoryGroup, UnicodeGeneralCategory};

/// Word -> occurrence count over a corpus. A `BTreeMap` so iteration order
/// is deterministic everywhere counts feed vocabulary induction.
pub type WordCounts = BTreeMap<String, u64>;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A monolingual corpus: documents of sentences, in file order.
///
/// Document boundaries are preserved because next-sentence-prediction pair
/// sampling needs them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCorpus {
    pub documents: Vec<Vec<String>>,
    pub language_tag: String,
}

impl RawCorpus {
    pub fn new(documents: Vec<Vec<String>>, language_tag: impl Into<String>) -> Self {
        RawCorpus {
            documents,
            language_tag: language_tag.into(),
        }
    }

    /// Parses the corpus file format: one sentence per line, blank line
    /// between documents, LF line endings.
    pub fn parse(text: &str, language_tag: impl Into<String>) -> Self {
        let mut documents = Vec::new();
        let mut current: Vec<String> = Vec::new();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(line.to_string());
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        RawCorpus::new(documents, language_tag)
    }

    pub fn load(path: impl AsRef<Path>, language_tag: impl Into<String>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(RawCorpus::parse(&text, language_tag))
    }

    /// Serializes back to the one-sentence-per-line format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, doc) in self.documents.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for sentence in doc {
                out.push_str(sentence);
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().flatten().map(|s| s.as_str())
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }
}

impl fmt::Display for RawCorpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RawCorpus({}, {} documents, {} sentences)",
            self.language_tag,
            self.documents.len(),
            self.sentence_count()
        )
    }
}

/// Whitespace per the BERT cleaner: ASCII space/tab/newline/CR plus the
/// Unicode space separator category.
pub fn is_whitespace(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r')
        || c.general_category() == GeneralCategory::SpaceSeparator
}

/// Control and format characters (includes zero-width characters); tab,
/// newline and CR are treated as whitespace instead.
pub fn is_control(c: char) -> bool {
    if matches!(c, '\t' | '\n' | '\r') {
        return false;
    }
    matches!(
        c.general_category(),
        GeneralCategory::Control | GeneralCategory::Format
    )
}

/// Punctuation predicate: the four ASCII symbol ranges the original BERT
/// basic tokenizer special-cases (33..=47, 58..=64, 91..=96, 123..=126)
/// plus everything in the Unicode P* categories.
pub fn is_punctuation(c: char) -> bool {
    let cp = c as u32;
    if (33..=47).contains(&cp)
        || (58..=64).contains(&cp)
        || (91..=96).contains(&cp)
        || (123..=126).contains(&cp)
    {
        return true;
    }
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// CJK Unified Ideograph blocks; each ideograph becomes its own word.
pub fn is_cjk(c: char) -> bool {
    let cp = c as u32;
    (0x4E00..=0x9FFF).contains(&cp)
        || (0x3400..=0x4DBF).contains(&cp)
        || (0x20000..=0x2A6DF).contains(&cp)
        || (0x2A700..=0x2B73F).contains(&cp)
        || (0x2B740..=0x2B81F).contains(&cp)
        || (0x2B820..=0x2CEAF).contains(&cp)
        || (0xF900..=0xFAFF).contains(&cp)
        || (0x2F800..=0x2FA1F).contains(&cp)
}

/// Case-folds and strips combining marks after canonical decomposition.
fn fold_word(word: &str) -> String {
    let mut out = String::with_capacity(word.len());
    for lower in word.chars().flat_map(char::to_lowercase) {
        decompose_canonical(lower, |c| {
            if !is_combining_mark(c) {
                out.push(c);
            }
        });
    }
    out
}

/// Splits raw text into words: the per-word units consumed by vocabulary
/// induction and WordPiece tokenization. Pure; empty input gives `[]`.
pub fn pre_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    // Strip control characters, normalize whitespace, isolate CJK.
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars() {
        if c == '\u{0}' || c == '\u{FFFD}' || is_control(c) {
            continue;
        }
        if is_whitespace(c) {
            cleaned.push(' ');
        } else if is_cjk(c) {
            cleaned.push(' ');
            cleaned.push(c);
            cleaned.push(' ');
        } else {
            cleaned.push(c);
        }
    }

    let mut words = Vec::new();
    for chunk in cleaned.split(' ').filter(|w| !w.is_empty()) {
        let chunk = if lowercase {
            fold_word(chunk)
        } else {
            chunk.to_string()
        };
        // Isolate punctuation characters as single-character words.
        let mut run = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !run.is_empty() {
                    words.push(std::mem::take(&mut run));
                }
                words.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            words.push(run);
        }
    }
    words
}

/// Multiset of `pre_tokenize` outputs over every sentence of the corpus.
pub fn count_words(corpus: &RawCorpus, lowercase: bool) -> WordCounts {
    let mut counts = WordCounts::new();
    for sentence in corpus.sentences() {
        for word in pre_tokenize(sentence, lowercase) {
            *counts.entry(word).or_insert(0) += 1;
        }
    }
    counts
}
