//! NER head and zero-shot evaluation protocol: linear emissions over the
//! encoder's first-subword features, a linear-chain CRF, Viterbi decoding,
//! and span-level F1.
//!
//! Fine-tuning sees source-language data only; target-language labels exist
//! solely in evaluation paths. Word-level features are taken from each
//! word's first WordPiece (the standard BERT tagging convention).

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape};
use crate::model::{
    bind_params, sequence_states, Dense, Dropout, ModelError, ModelParameters,
};
use crate::optim::{lr_at, AdamState, NonFiniteGradient};
use crate::rng::Rng;
use crate::tokenizer::encode_words;
use crate::vocab::Vocabulary;

const STREAM_NER_INIT: u64 = 0x20;
const STREAM_NER_SHUFFLE: u64 = 0x21;
const STREAM_NER_DROPOUT_TAG: u64 = 0x22;

/// Default entity inventory.
pub const DEFAULT_ENTITY_TYPES: [&str; 4] = ["PER", "ORG", "GPE", "LOC"];

#[derive(Debug, thiserror::Error)]
pub enum TaggerError {
    #[error("sentence has {words} words but {tags} tags")]
    LengthMismatch { words: usize, tags: usize },
    #[error("unknown tag {tag:?}")]
    UnknownTag { tag: String },
    #[error("invalid BIO transition: {tag:?} at position {position} cannot follow {previous:?}")]
    InvalidBio {
        tag: String,
        previous: String,
        position: usize,
    },
    #[error("prediction/gold sets misaligned: {reason}")]
    Misaligned { reason: String },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid ner config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    NonFiniteGradient(#[from] NonFiniteGradient),
    #[error("tagger head io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("tagger head parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// The BIO tag inventory over a set of entity types: `O` at index 0, then
/// `B-X`, `I-X` per type in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    pub entity_types: Vec<String>,
}

impl Default for TagSet {
    fn default() -> Self {
        TagSet {
            entity_types: DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TagSet {
    pub fn tag_count(&self) -> usize {
        2 * self.entity_types.len() + 1
    }

    pub fn tag_name(&self, index: usize) -> String {
        if index == 0 {
            "O".to_string()
        } else {
            let ty = &self.entity_types[(index - 1) / 2];
            if index % 2 == 1 {
                format!("B-{ty}")
            } else {
                format!("I-{ty}")
            }
        }
    }

    pub fn tag_index(&self, tag: &str) -> Result<usize, TaggerError> {
        if tag == "O" {
            return Ok(0);
        }
        let (kind, ty) = tag.split_once('-').ok_or_else(|| TaggerError::UnknownTag {
            tag: tag.to_string(),
        })?;
        let pos = self
            .entity_types
            .iter()
            .position(|t| t == ty)
            .ok_or_else(|| TaggerError::UnknownTag {
                tag: tag.to_string(),
            })?;
        match kind {
            "B" => Ok(1 + 2 * pos),
            "I" => Ok(2 + 2 * pos),
            _ => Err(TaggerError::UnknownTag {
                tag: tag.to_string(),
            }),
        }
    }

    /// Checks the BIO grammar: I-X must follow B-X or I-X of the same type.
    pub fn validate_bio(&self, tags: &[String]) -> Result<(), TaggerError> {
        let mut previous = "O".to_string();
        for (position, tag) in tags.iter().enumerate() {
            self.tag_index(tag)?;
            if let Some(ty) = tag.strip_prefix("I-") {
                let follows_same = previous == format!("B-{ty}") || previous == format!("I-{ty}");
                if !follows_same {
                    return Err(TaggerError::InvalidBio {
                        tag: tag.clone(),
                        previous,
                        position,
                    });
                }
            }
            previous = tag.clone();
        }
        Ok(())
    }
}

/// Words with parallel BIO tags; the unit of NER training and evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

impl TaggedSentence {
    pub fn new(
        words: Vec<String>,
        tags: Vec<String>,
        tagset: &TagSet,
    ) -> Result<Self, TaggerError> {
        if words.len() != tags.len() {
            return Err(TaggerError::LengthMismatch {
                words: words.len(),
                tags: tags.len(),
            });
        }
        tagset.validate_bio(&tags)?;
        Ok(TaggedSentence { words, tags })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// CoNLL-style TSV: `word<TAB>tag` per line, blank line between sentences.
pub fn parse_conll(text: &str, tagset: &TagSet) -> Result<Vec<TaggedSentence>, TaggerError> {
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            if !words.is_empty() {
                sentences.push(TaggedSentence::new(
                    std::mem::take(&mut words),
                    std::mem::take(&mut tags),
                    tagset,
                )?);
            }
            continue;
        }
        let (word, tag) = line.split_once('\t').ok_or_else(|| TaggerError::Misaligned {
            reason: format!("line {line:?} is not word<TAB>tag"),
        })?;
        words.push(word.to_string());
        tags.push(tag.to_string());
    }
    if !words.is_empty() {
        sentences.push(TaggedSentence::new(words, tags, tagset)?);
    }
    Ok(sentences)
}

pub fn to_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (w, t) in s.words.iter().zip(&s.tags) {
            out.push_str(w);
            out.push('\t');
            out.push_str(t);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Emission projection plus CRF transition/start/end scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParameters<F: Scalar> {
    pub emission: Dense<F>,     // d × T
    pub transitions: Array2<F>, // T × T
    pub start: Array2<F>,       // 1 × T
    pub end: Array2<F>,         // 1 × T
}

impl<F: Scalar> CrfParameters<F> {
    pub fn tag_count(&self) -> usize {
        self.transitions.nrows()
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a Array2<F>)) {
        f("ner.emission.weight", &self.emission.weight);
        f("ner.emission.bias", &self.emission.bias);
        f("ner.transitions", &self.transitions);
        f("ner.start", &self.start);
        f("ner.end", &self.end);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<F>)) {
        f("ner.emission.weight", &mut self.emission.weight);
        f("ner.emission.bias", &mut self.emission.bias);
        f("ner.transitions", &mut self.transitions);
        f("ner.start", &mut self.start);
        f("ner.end", &mut self.end);
    }

    pub fn convert<G: Scalar>(&self) -> CrfParameters<G> {
        let conv = |a: &Array2<F>| a.mapv(|x| G::from_f64(x.to_f64()));
        CrfParameters {
            emission: Dense {
                weight: conv(&self.emission.weight),
                bias: conv(&self.emission.bias),
            },
            transitions: conv(&self.transitions),
            start: conv(&self.start),
            end: conv(&self.end),
        }
    }
}

/// Emission projection drawn truncated-normal(0, 0.02); transition, start,
/// and end scores start at zero.
pub fn init_crf(hidden_size: usize, tagset: &TagSet, seed: u64) -> CrfParameters<f32> {
    let t = tagset.tag_count();
    let mut rng = Rng::for_stream(seed, &[STREAM_NER_INIT]);
    let mut weight = Array2::zeros((hidden_size, t));
    weight.mapv_inplace(|_: f32| {
        rng.truncated_normal(crate::model::INIT_STD, crate::model::INIT_CUTOFF_SIGMAS) as f32
    });
    CrfParameters {
        emission: Dense {
            weight,
            bias: Array2::zeros((1, t)),
        },
        transitions: Array2::zeros((t, t)),
        start: Array2::zeros((1, t)),
        end: Array2::zeros((1, t)),
    }
}

/// log p(tags | emissions) = score(tags) − logZ, with logZ from the forward
/// algorithm in log space.
pub fn crf_log_likelihood<F: Scalar>(
    emissions: &Array2<F>,
    crf: &CrfParameters<F>,
    tags: &[usize],
) -> F {
    let mut tape: Tape<F> = Tape::new();
    let em = tape.constant(emissions.clone());
    let tr = tape.constant(crf.transitions.clone());
    let st = tape.constant(crf.start.clone());
    let en = tape.constant(crf.end.clone());
    let log_z = tape.crf_log_z(em, tr, st, en);
    let score = tape.crf_score(em, tr, st, en, tags.to_vec());
    tape.scalar(score) - tape.scalar(log_z)
}

/// Max-scoring tag sequence and its score. Ties break toward the lower tag
/// index at every backpointer and at the final state.
pub fn viterbi_decode<F: Scalar>(
    emissions: &Array2<F>,
    crf: &CrfParameters<F>,
) -> (Vec<usize>, F) {
    let (len, n_tags) = emissions.dim();
    assert!(len >= 1, "empty emission sequence");
    let mut delta = Array2::<F>::zeros((len, n_tags));
    let mut backpointer = vec![vec![0usize; n_tags]; len];
    for j in 0..n_tags {
        delta[(0, j)] = crf.start[(0, j)] + emissions[(0, j)];
    }
    for t in 1..len {
        for j in 0..n_tags {
            let mut best_i = 0;
            let mut best = delta[(t - 1, 0)] + crf.transitions[(0, j)];
            for i in 1..n_tags {
                let cand = delta[(t - 1, i)] + crf.transitions[(i, j)];
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            delta[(t, j)] = best + emissions[(t, j)];
            backpointer[t][j] = best_i;
        }
    }
    let mut best_j = 0;
    let mut best = delta[(len - 1, 0)] + crf.end[(0, 0)];
    for j in 1..n_tags {
        let cand = delta[(len - 1, j)] + crf.end[(0, j)];
        if cand > best {
            best = cand;
            best_j = j;
        }
    }
    let mut path = vec![0usize; len];
    path[len - 1] = best_j;
    for t in (1..len).rev() {
        path[t - 1] = backpointer[t][path[t]];
    }
    (path, best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub lowercase: bool,
    pub warmup_steps: u64,
}

impl NerConfig {
    pub fn with_budget(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        NerConfig {
            epochs,
            learning_rate,
            batch_size: 8,
            max_seq_len: 64,
            seed,
            freeze_encoder: false,
            lowercase: true,
            warmup_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TaggerError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TaggerError::InvalidConfig {
                reason: "epochs and batch_size must be >= 1".into(),
            });
        }
        if self.max_seq_len < 3 {
            return Err(TaggerError::InvalidConfig {
                reason: "max_seq_len must be >= 3".into(),
            });
        }
        Ok(())
    }
}

/// A sentence encoded for the tagger: model input plus, for the prefix of
/// words that survived truncation, their first-piece positions and tag ids.
struct EncodedNerSentence {
    item: crate::model::BatchItem,
    first_piece_positions: Vec<usize>,
    tag_ids: Vec<usize>,
}

fn encode_ner_sentence(
    sentence: &TaggedSentence,
    vocab: &Vocabulary,
    tagset: &TagSet,
    cfg: &NerConfig,
) -> Result<Option<EncodedNerSentence>, TaggerError> {
    if sentence.is_empty() {
        return Ok(None);
    }
    let words: Vec<String> = if cfg.lowercase {
        sentence
            .words
            .iter()
            .flat_map(|w| crate::corpus::pre_tokenize(w, true))
            .collect()
    } else {
        sentence.words.clone()
    };
    // Lowercasing individual words must not split them (they are already
    // pre-tokenized units); if it does, fall back to the raw word.
    let words: Vec<String> = if words.len() == sentence.words.len() {
        words
    } else {
        sentence.words.clone()
    };

    let enc = encode_words(&words, vocab, cfg.max_seq_len);
    let mut positions = Vec::new();
    let mut tag_ids = Vec::new();
    for (w, slot) in enc.word_first_piece.iter().enumerate() {
        match slot {
            Some(p) => {
                positions.push(*p);
                tag_ids.push(tagset.tag_index(&sentence.tags[w])?);
            }
            None => break,
        }
    }
    if positions.is_empty() {
        return Ok(None);
    }
    Ok(Some(EncodedNerSentence {
        item: crate::model::BatchItem::from_ids(enc.tokens.ids),
        first_piece_positions: positions,
        tag_ids,
    }))
}

/// Mean CRF negative log-likelihood over a batch, with gradients for the
/// encoder (slots 0..M) and the head (slots M..M+5).
fn ner_batch_gradients<F: Scalar>(
    params: &ModelParameters<F>,
    crf: &CrfParameters<F>,
    batch: &[&EncodedNerSentence],
    dropout_tag: Option<u64>,
) -> Result<(f64, Vec<Array2<F>>), TaggerError> {
    let mut tape: Tape<F> = Tape::new();
    let bound = bind_params(&mut tape, params);
    let m = bound.n_slots;
    let em_w = tape.param(crf.emission.weight.clone(), m);
    let em_b = tape.param(crf.emission.bias.clone(), m + 1);
    let tr = tape.param(crf.transitions.clone(), m + 2);
    let st = tape.param(crf.start.clone(), m + 3);
    let en = tape.param(crf.end.clone(), m + 4);

    let mut terms = Vec::new();
    for (k, sent) in batch.iter().enumerate() {
        let drop = dropout_tag.and_then(|tag| {
            Dropout::new(
                STREAM_NER_DROPOUT_TAG,
                tag.wrapping_add(k as u64),
                params.config.dropout,
            )
        });
        let (hidden, _) = sequence_states(&mut tape, &bound, &params.config, &sent.item, drop)?;
        let word_states = tape.gather_rows(hidden, sent.first_piece_positions.clone());
        let xw = tape.matmul(word_states, em_w);
        let emissions = tape.add_row_vec(xw, em_b);
        let log_z = tape.crf_log_z(emissions, tr, st, en);
        let score = tape.crf_score(emissions, tr, st, en, sent.tag_ids.clone());
        let neg_score = tape.scale(score, F::from_f64(-1.0));
        terms.push(tape.add(log_z, neg_score));
    }
    let n = terms.len();
    let sum = terms
        .into_iter()
        .reduce(|a, b| tape.add(a, b))
        .expect("batch nonempty");
    let mean = tape.scale(sum, F::from_f64(1.0 / n as f64));
    let loss = tape.scalar(mean).to_f64();
    let grads = tape.backward(mean, m + 5);

    let mut out = Vec::with_capacity(m + 5);
    let mut slot = 0;
    params.visit(|_, tensor| {
        out.push(match grads.slot(slot) {
            Some(g) => g.clone(),
            None => Array2::zeros(tensor.dim()),
        });
        slot += 1;
    });
    crf.visit(|_, tensor| {
        out.push(match grads.slot(slot) {
            Some(g) => g.clone(),
            None => Array2::zeros(tensor.dim()),
        });
        slot += 1;
    });
    Ok((loss, out))
}

/// Fine-tunes on labeled sentences (source language only, per the zero-shot
/// protocol). Returns updated parameters and the per-epoch mean loss log.
/// With `freeze_encoder` only the emission/CRF head moves.
pub fn finetune_ner(
    params: &ModelParameters<f32>,
    crf: &CrfParameters<f32>,
    train: &[TaggedSentence],
    vocab: &Vocabulary,
    tagset: &TagSet,
    cfg: &NerConfig,
) -> Result<(ModelParameters<f32>, CrfParameters<f32>, Vec<(u64, f64)>), TaggerError> {
    cfg.validate()?;
    let encoded: Vec<EncodedNerSentence> = train
        .iter()
        .map(|s| encode_ner_sentence(s, vocab, tagset, cfg))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    if encoded.is_empty() {
        return Err(TaggerError::EmptyTrainingSet);
    }

    let mut params = params.clone();
    let mut crf = crf.clone();
    let mut shapes = Vec::new();
    params.visit(|_, t| shapes.push(t.dim()));
    let n_model = shapes.len();
    crf.visit(|_, t| shapes.push(t.dim()));
    let mut adam: AdamState<f32> = AdamState::for_shapes(shapes);

    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::for_stream(cfg.seed, &[STREAM_NER_SHUFFLE, epoch as u64]);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedNerSentence> = chunk.iter().map(|&i| &encoded[i]).collect();
            let tag = (epoch as u64) << 24 | (b as u64);
            let dropout_tag = (params.config.dropout > 0.0).then_some(tag ^ cfg.seed);
            let (loss, grads) = ner_batch_gradients(&params, &crf, &batch, dropout_tag)?;
            epoch_loss += loss;
            n_batches += 1;

            let t = adam.begin_step();
            let lr_t = lr_at(cfg.learning_rate, cfg.warmup_steps, t);
            let mut idx = 0;
            let mut failure: Option<NonFiniteGradient> = None;
            params.visit_mut(|name, tensor| {
                if failure.is_none() && !cfg.freeze_encoder {
                    if let Err(e) = adam.update_tensor(idx, name, tensor, &grads[idx], lr_t) {
                        failure = Some(e);
                    }
                }
                idx += 1;
            });
            debug_assert_eq!(idx, n_model);
            crf.visit_mut(|name, tensor| {
                if failure.is_none() {
                    if let Err(e) = adam.update_tensor(idx, name, tensor, &grads[idx], lr_t) {
                        failure = Some(e);
                    }
                }
                idx += 1;
            });
            if let Some(e) = failure {
                return Err(e.into());
            }
        }
        log.push(((epoch + 1) as u64, epoch_loss / n_batches as f64));
    }
    Ok((params, crf, log))
}

/// Tags one sentence: encode, first-subword states, emissions, Viterbi,
/// then the BIO repair rule (orphan I-X becomes B-X). Words dropped by
/// truncation come back as `O`.
pub fn predict(
    params: &ModelParameters<f32>,
    crf: &CrfParameters<f32>,
    words: &[String],
    vocab: &Vocabulary,
    tagset: &TagSet,
    cfg: &NerConfig,
) -> Result<Vec<String>, TaggerError> {
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let sentence = TaggedSentence {
        words: words.to_vec(),
        tags: vec!["O".to_string(); words.len()],
    };
    let Some(enc) = encode_ner_sentence(&sentence, vocab, tagset, cfg)? else {
        return Ok(vec!["O".to_string(); words.len()]);
    };

    let mut tape: Tape<f32> = Tape::new();
    let bound = bind_params(&mut tape, params);
    let (hidden, _) = sequence_states(&mut tape, &bound, &params.config, &enc.item, None)?;
    let word_states = tape.gather_rows(hidden, enc.first_piece_positions.clone());
    let em_w = tape.constant(crf.emission.weight.clone());
    let em_b = tape.constant(crf.emission.bias.clone());
    let xw = tape.matmul(word_states, em_w);
    let emissions_var = tape.add_row_vec(xw, em_b);
    let emissions = tape.value(emissions_var).clone();

    let (path, _) = viterbi_decode(&emissions, crf);
    let mut tags: Vec<String> = path.iter().map(|&i| tagset.tag_name(i)).collect();
    repair_bio(&mut tags);
    tags.resize(words.len(), "O".to_string());
    Ok(tags)
}

/// CoNLL repair convention: I-X with no live X span behind it becomes B-X.
pub fn repair_bio(tags: &mut [String]) {
    let mut previous = "O".to_string();
    for tag in tags.iter_mut() {
        if let Some(ty) = tag.clone().strip_prefix("I-") {
            let ok = previous == format!("B-{ty}") || previous == format!("I-{ty}");
            if !ok {
                *tag = format!("B-{ty}");
            }
        }
        previous = tag.clone();
    }
}

/// Maximal (type, start, end) spans of a BIO sequence; orphan I-X opens a
/// span, matching the repair rule.
pub fn extract_spans(tags: &[String]) -> BTreeSet<(String, usize, usize)> {
    let mut spans = BTreeSet::new();
    let mut current: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let next = if tag == "O" {
            None
        } else if let Some(ty) = tag.strip_prefix("B-") {
            Some((ty.to_string(), true))
        } else if let Some(ty) = tag.strip_prefix("I-") {
            Some((ty.to_string(), false))
        } else {
            None
        };
        match next {
            None => {
                if let Some((ty, start)) = current.take() {
                    spans.insert((ty, start, i - 1));
                }
            }
            Some((ty, begins)) => {
                let continues = matches!(&current, Some((cur, _)) if *cur == ty) && !begins;
                if !continues {
                    if let Some((prev, start)) = current.take() {
                        spans.insert((prev, start, i - 1));
                    }
                    current = Some((ty, i));
                }
            }
        }
    }
    if let Some((ty, start)) = current {
        spans.insert((ty, start, tags.len() - 1));
    }
    spans
}

/// Span-level precision/recall/F1 with exact (type, boundary) matching.
/// Zero-denominator ratios are 0, except that two span-free sets count as
/// perfect agreement (F1 = 1).
pub fn span_f1(
    pred: &[TaggedSentence],
    gold: &[TaggedSentence],
) -> Result<(f64, f64, f64), TaggerError> {
    if pred.len() != gold.len() {
        return Err(TaggerError::Misaligned {
            reason: format!("{} predicted vs {} gold sentences", pred.len(), gold.len()),
        });
    }
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut n_match = 0usize;
    for (p, g) in pred.iter().zip(gold.iter()) {
        if p.words.len() != g.words.len() {
            return Err(TaggerError::Misaligned {
                reason: format!(
                    "sentence length mismatch: {} vs {}",
                    p.words.len(),
                    g.words.len()
                ),
            });
        }
        let ps = extract_spans(&p.tags);
        let gs = extract_spans(&g.tags);
        n_pred += ps.len();
        n_gold += gs.len();
        n_match += ps.intersection(&gs).count();
    }
    if n_pred == 0 && n_gold == 0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let precision = if n_pred == 0 {
        0.0
    } else {
        n_match as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        0.0
    } else {
        n_match as f64 / n_gold as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

/// Serialized tagger head (JSON; f32 values round-trip exactly).
#[derive(Serialize, Deserialize)]
struct CrfFile {
    entity_types: Vec<String>,
    emission_weight: Vec<Vec<f32>>,
    emission_bias: Vec<f32>,
    transitions: Vec<Vec<f32>>,
    start: Vec<f32>,
    end: Vec<f32>,
}

fn rows(a: &Array2<f32>) -> Vec<Vec<f32>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f32>]) -> Array2<f32> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((nrows, ncols), |(r, c)| rows[r][c])
}

pub fn save_crf(
    crf: &CrfParameters<f32>,
    tagset: &TagSet,
    path: impl AsRef<Path>,
) -> Result<(), TaggerError> {
    let path = path.as_ref();
    let file = CrfFile {
        entity_types: tagset.entity_types.clone(),
        emission_weight: rows(&crf.emission.weight),
        emission_bias: crf.emission.bias.row(0).to_vec(),
        transitions: rows(&crf.transitions),
        start: crf.start.row(0).to_vec(),
        end: crf.end.row(0).to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| TaggerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_crf(path: impl AsRef<Path>) -> Result<(CrfParameters<f32>, TagSet), TaggerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TaggerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CrfFile = serde_json::from_str(&text)?;
    let t = 2 * file.entity_types.len() + 1;
    let crf = CrfParameters {
        emission: Dense {
            weight: from_rows(&file.emission_weight),
            bias: Array2::from_shape_fn((1, t), |(_, c)| file.emission_bias[c]),
        },
        transitions: from_rows(&file.transitions),
        start: Array2::from_shape_fn((1, t), |(_, c)| file.start[c]),
        end: Array2::from_shape_fn((1, t), |(_, c)| file.end[c]),
    };
    Ok((
        crf,
        TagSet {
            entity_types: file.entity_types,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::vocab::{Vocabulary, SPECIAL_TOKENS};
    use ndarray::array;

    fn tagset2() -> TagSet {
        TagSet {
            entity_types: vec!["PER".into(), "LOC".into()],
        }
    }

    #[test]
    fn tag_indexing_round_trips() {
        let ts = TagSet::default();
        assert_eq!(ts.tag_count(), 9);
        for i in 0..ts.tag_count() {
            assert_eq!(ts.tag_index(&ts.tag_name(i)).unwrap(), i);
        }
        assert!(ts.tag_index("B-XYZ").is_err());
        assert!(ts.tag_index("Q-PER").is_err());
    }

    #[test]
    fn bio_grammar_validation() {
        let ts = tagset2();
        assert!(ts
            .validate_bio(&["B-PER".into(), "I-PER".into(), "O".into()])
            .is_ok());
        assert!(matches!(
            ts.validate_bio(&["O".into(), "I-PER".into()]),
            Err(TaggerError::InvalidBio { position: 1, .. })
        ));
        assert!(matches!(
            ts.validate_bio(&["B-PER".into(), "I-LOC".into()]),
            Err(TaggerError::InvalidBio { .. })
        ));
    }

    #[test]
    fn crf_log_likelihood_uniform_case() {
        // L=1, T=2, all zeros: logZ = ln 2, so ll = −ln 2.
        let crf = CrfParameters::<f64> {
            emission: Dense {
                weight: Array2::zeros((4, 2)),
                bias: Array2::zeros((1, 2)),
            },
            transitions: Array2::zeros((2, 2)),
            start: Array2::zeros((1, 2)),
            end: Array2::zeros((1, 2)),
        };
        let em = Array2::zeros((1, 2));
        let ll = crf_log_likelihood(&em, &crf, &[0]);
        assert!((ll + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn crf_normalization_by_enumeration() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..20 {
            let t = 2 + rng.below(3);
            let l = 1 + rng.below(5);
            let em = Array2::from_shape_fn((l, t), |_| rng.normal());
            let crf = CrfParameters::<f64> {
                emission: Dense {
                    weight: Array2::zeros((4, t)),
                    bias: Array2::zeros((1, t)),
                },
                transitions: Array2::from_shape_fn((t, t), |_| rng.normal()),
                start: Array2::from_shape_fn((1, t), |_| rng.normal()),
                end: Array2::from_shape_fn((1, t), |_| rng.normal()),
            };
            // Σ over all T^L tag paths of exp(log-likelihood) must be 1.
            let n_paths = (t as u64).pow(l as u32);
            let mut total = 0.0;
            for idx in 0..n_paths {
                let mut rem = idx;
                let mut tags = Vec::with_capacity(l);
                for _ in 0..l {
                    tags.push((rem % t as u64) as usize);
                    rem /= t as u64;
                }
                total += crf_log_likelihood(&em, &crf, &tags).exp();
            }
            assert!((total - 1.0).abs() < 1e-8, "sum {total}");
        }
    }

    #[test]
    fn viterbi_matches_hand_example_and_tie_break() {
        let crf = CrfParameters::<f64> {
            emission: Dense {
                weight: Array2::zeros((4, 2)),
                bias: Array2::zeros((1, 2)),
            },
            transitions: Array2::zeros((2, 2)),
            start: Array2::zeros((1, 2)),
            end: Array2::zeros((1, 2)),
        };
        let em = array![[1.0, 0.0], [0.0, 1.0]];
        let (path, score) = viterbi_decode(&em, &crf);
        assert_eq!(path, vec![0, 1]);
        assert!((score - 2.0).abs() < 1e-12);

        let zeros = Array2::zeros((3, 2));
        let (path, _) = viterbi_decode(&zeros, &crf);
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn viterbi_and_log_z_match_enumeration_on_random_instances() {
        let mut rng = Rng::from_seed(37);
        for _ in 0..50 {
            let t = 2 + rng.below(3);
            let l = 1 + rng.below(6);
            let em = Array2::from_shape_fn((l, t), |_| rng.normal());
            let crf = CrfParameters::<f64> {
                emission: Dense {
                    weight: Array2::zeros((4, t)),
                    bias: Array2::zeros((1, t)),
                },
                transitions: Array2::from_shape_fn((t, t), |_| rng.normal()),
                start: Array2::from_shape_fn((1, t), |_| rng.normal()),
                end: Array2::from_shape_fn((1, t), |_| rng.normal()),
            };
            let em_rows: Vec<Vec<f64>> = em.rows().into_iter().map(|r| r.to_vec()).collect();
            let tr_rows: Vec<Vec<f64>> =
                crf.transitions.rows().into_iter().map(|r| r.to_vec()).collect();
            let reference = graft_oracles::enumerate_crf(
                &em_rows,
                &tr_rows,
                crf.start.row(0).to_vec().as_slice(),
                crf.end.row(0).to_vec().as_slice(),
            );
            let (path, score) = viterbi_decode(&em, &crf);
            assert_eq!(path, reference.best_path);
            assert!((score - reference.best_score).abs() < 1e-8);
            let ll = crf_log_likelihood(&em, &crf, &reference.best_path);
            assert!((ll - (reference.best_score - reference.log_z)).abs() < 1e-8);
        }
    }

    #[test]
    fn span_extraction_and_f1_examples() {
        let ts = tagset2();
        let gold = TaggedSentence::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["B-PER".into(), "I-PER".into(), "O".into()],
            &ts,
        )
        .unwrap();
        let pred = TaggedSentence {
            words: gold.words.clone(),
            tags: vec!["B-PER".into(), "O".into(), "O".into()],
        };
        // Gold span PER(0,1), predicted span PER(0,0): no match.
        let (p, r, f1) = span_f1(&[pred], &[gold.clone()]).unwrap();
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));

        // Exact agreement.
        let (p, r, f1) = span_f1(&[gold.clone()], &[gold.clone()]).unwrap();
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));

        // Two predicted spans, one exact match, one gold span.
        let gold2 = TaggedSentence {
            words: vec!["a".into(), "b".into(), "c".into()],
            tags: vec!["B-PER".into(), "O".into(), "O".into()],
        };
        let pred2 = TaggedSentence {
            words: gold2.words.clone(),
            tags: vec!["B-PER".into(), "O".into(), "B-LOC".into()],
        };
        let (p, r, f1) = span_f1(&[pred2], &[gold2]).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn span_f1_conventions() {
        let empty = TaggedSentence {
            words: vec!["a".into()],
            tags: vec!["O".into()],
        };
        assert_eq!(
            span_f1(&[empty.clone()], &[empty.clone()]).unwrap(),
            (1.0, 1.0, 1.0)
        );
        let with_span = TaggedSentence {
            words: vec!["a".into()],
            tags: vec!["B-PER".into()],
        };
        assert_eq!(
            span_f1(&[empty.clone()], &[with_span.clone()]).unwrap(),
            (0.0, 0.0, 0.0)
        );
        // Swapping pred and gold swaps P and R.
        assert_eq!(span_f1(&[with_span], &[empty]).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn span_f1_swap_symmetry() {
        let a = TaggedSentence {
            words: (0..5).map(|i| format!("w{i}")).collect(),
            tags: vec![
                "B-PER".into(),
                "I-PER".into(),
                "O".into(),
                "B-LOC".into(),
                "O".into(),
            ],
        };
        let b = TaggedSentence {
            words: a.words.clone(),
            tags: vec![
                "B-PER".into(),
                "I-PER".into(),
                "O".into(),
                "O".into(),
                "B-LOC".into(),
            ],
        };
        let (p1, r1, f1a) = span_f1(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        let (p2, r2, f1b) = span_f1(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap();
        assert_eq!((p1, r1), (r2, p2));
        assert_eq!(f1a, f1b);
    }

    #[test]
    fn misaligned_inputs_error() {
        let a = TaggedSentence {
            words: vec!["a".into()],
            tags: vec!["O".into()],
        };
        assert!(matches!(
            span_f1(&[a.clone()], &[]),
            Err(TaggerError::Misaligned { .. })
        ));
        let b = TaggedSentence {
            words: vec!["a".into(), "b".into()],
            tags: vec!["O".into(), "O".into()],
        };
        assert!(matches!(
            span_f1(&[a], &[b]),
            Err(TaggerError::Misaligned { .. })
        ));
    }

    #[test]
    fn repair_rule_rewrites_orphan_inside_tags() {
        let mut tags = vec!["I-PER".to_string(), "I-PER".to_string(), "O".to_string()];
        repair_bio(&mut tags);
        assert_eq!(tags, vec!["B-PER", "I-PER", "O"]);

        let mut tags = vec!["B-LOC".to_string(), "I-PER".to_string()];
        repair_bio(&mut tags);
        assert_eq!(tags, vec!["B-LOC", "B-PER"]);
    }

    #[test]
    fn conll_round_trip() {
        let ts = tagset2();
        let text = "john\tB-PER\nsmith\tI-PER\nhome\tO\n\nparis\tB-LOC\n\n";
        let sentences = parse_conll(text, &ts).unwrap();
        assert_eq!(sentences.len(), 2);
        assert_eq!(to_conll(&sentences), text);
    }

    fn word_vocab(words: &[&str]) -> Vocabulary {
        let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        pieces.extend(words.iter().map(|s| s.to_string()));
        Vocabulary::from_pieces(pieces).unwrap()
    }

    fn tiny_ner_setup() -> (ModelParameters<f32>, CrfParameters<f32>, Vocabulary, TagSet) {
        let vocab = word_vocab(&[
            "anna", "bob", "cara", "dan", "visits", "leaves", "paris", "rome", "oslo", "today",
            "often", ".",
        ]);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            hidden_size: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            max_position: 16,
            type_vocab: 2,
            dropout: 0.0,
            seed: 5,
        };
        let params = init_model(&cfg).unwrap();
        let ts = tagset2();
        let crf = init_crf(16, &ts, 5);
        (params, crf, vocab, ts)
    }

    fn toy_training_set(ts: &TagSet) -> Vec<TaggedSentence> {
        let data: [(&str, &str); 10] = [
            ("anna visits paris .", "B-PER O B-LOC O"),
            ("bob visits rome .", "B-PER O B-LOC O"),
            ("cara leaves oslo .", "B-PER O B-LOC O"),
            ("dan visits oslo .", "B-PER O B-LOC O"),
            ("anna leaves rome .", "B-PER O B-LOC O"),
            ("bob leaves paris .", "B-PER O B-LOC O"),
            ("cara visits paris today .", "B-PER O B-LOC O O"),
            ("dan leaves rome today .", "B-PER O B-LOC O O"),
            ("anna visits oslo often .", "B-PER O B-LOC O O"),
            ("bob visits paris often .", "B-PER O B-LOC O O"),
        ];
        data.iter()
            .map(|(w, t)| {
                TaggedSentence::new(
                    w.split(' ').map(String::from).collect(),
                    t.split(' ').map(String::from).collect(),
                    ts,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn finetune_overfits_small_training_set() {
        let (params, crf, vocab, ts) = tiny_ner_setup();
        let train = toy_training_set(&ts);
        let cfg = NerConfig {
            max_seq_len: 16,
            ..NerConfig::with_budget(30, 3e-3, 5)
        };
        let (params, crf, log) = finetune_ner(&params, &crf, &train, &vocab, &ts, &cfg).unwrap();
        assert!(log.last().unwrap().1 < log.first().unwrap().1);
        let pred: Vec<TaggedSentence> = train
            .iter()
            .map(|s| TaggedSentence {
                words: s.words.clone(),
                tags: predict(&params, &crf, &s.words, &vocab, &ts, &cfg).unwrap(),
            })
            .collect();
        let (_, _, f1) = span_f1(&pred, &train).unwrap();
        assert!((f1 - 1.0).abs() < 1e-12, "training-set F1 {f1}");
    }

    #[test]
    fn freeze_encoder_touches_only_the_head() {
        let (params, crf, vocab, ts) = tiny_ner_setup();
        let train = toy_training_set(&ts);
        let cfg = NerConfig {
            max_seq_len: 16,
            freeze_encoder: true,
            ..NerConfig::with_budget(2, 1e-3, 5)
        };
        let (p2, crf2, _) = finetune_ner(&params, &crf, &train, &vocab, &ts, &cfg).unwrap();
        assert_eq!(p2, params);
        assert_ne!(crf2.emission.weight, crf.emission.weight);
        assert_ne!(crf2.transitions, crf.transitions);
    }

    #[test]
    fn finetune_is_deterministic() {
        let (params, crf, vocab, ts) = tiny_ner_setup();
        let train = toy_training_set(&ts);
        let cfg = NerConfig {
            max_seq_len: 16,
            ..NerConfig::with_budget(3, 1e-3, 9)
        };
        let a = finetune_ner(&params, &crf, &train, &vocab, &ts, &cfg).unwrap();
        let b = finetune_ner(&params, &crf, &train, &vocab, &ts, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn finetune_rejects_empty_training_set() {
        let (params, crf, vocab, ts) = tiny_ner_setup();
        let cfg = NerConfig::with_budget(1, 1e-3, 5);
        assert!(matches!(
            finetune_ner(&params, &crf, &[], &vocab, &ts, &cfg),
            Err(TaggerError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn predict_edge_cases() {
        let (params, crf, vocab, ts) = tiny_ner_setup();
        let cfg = NerConfig::with_budget(1, 1e-3, 5);
        assert!(predict(&params, &crf, &[], &vocab, &ts, &cfg).unwrap().is_empty());
        let one = predict(&params, &crf, &["anna".to_string()], &vocab, &ts, &cfg).unwrap();
        assert_eq!(one.len(), 1);
        // Output always satisfies the BIO grammar after repair.
        ts.validate_bio(&one).unwrap();
    }

    #[test]
    fn ner_loss_gradients_match_finite_differences() {
        let (params, crf, vocab, ts) = tiny_ner_setup();
        let train = toy_training_set(&ts);
        let cfg = NerConfig::with_budget(1, 1e-3, 5);
        let enc = encode_ner_sentence(&train[0], &vocab, &ts, &cfg)
            .unwrap()
            .unwrap();

        // Generic f64 point.
        let mut p64 = params.convert::<f64>();
        let mut noise = Rng::from_seed(77);
        p64.visit_mut(|_, t| t.mapv_inplace(|x| x + 0.3 * noise.normal()));
        let mut crf64 = crf.convert::<f64>();
        crf64.visit_mut(|_, t| t.mapv_inplace(|x| x + 0.3 * noise.normal()));

        let (_, analytic) = ner_batch_gradients(&p64, &crf64, &[&enc], None).unwrap();

        // Probe a few coordinates in the head and a few in the encoder.
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for (slot_from_end, r, c) in [(5usize, 2, 1), (3, 1, 3), (2, 0, 2), (1, 0, 0)] {
            let slot = analytic.len() - slot_from_end;
            let numeric = {
                let eval = |delta: f64| {
                    let mut p = p64.clone();
                    let mut h = crf64.clone();
                    let mut idx = 0;
                    let n_model = analytic.len() - 5;
                    p.visit_mut(|_, t| {
                        if idx == slot {
                            t[(r, c)] += delta;
                        }
                        idx += 1;
                    });
                    let _ = n_model;
                    h.visit_mut(|_, t| {
                        if idx == slot {
                            t[(r, c)] += delta;
                        }
                        idx += 1;
                    });
                    ner_batch_gradients(&p, &h, &[&enc], None).unwrap().0
                };
                (eval(eps) - eval(-eps)) / (2.0 * eps)
            };
            let a = analytic[slot][(r, c)];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-6, "worst rel err {worst}");
    }
}
