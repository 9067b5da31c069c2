//! Synthetic bilingual data and the scripted experiments.
//!
//! A synthetic language pair is two corpora drawn from one templated
//! subject–verb–object grammar with entity slots. The target language is
//! the same generative process routed through a character cipher onto a
//! disjoint alphabet (so the base vocabulary covers none of its content
//! words) plus a mild word-order perturbation. Cipher pairs keep the
//! cross-lingual structure learnable while guaranteeing zero vocabulary
//! overlap, which isolates the missing-word-piece problem the extension
//! method addresses.
//!
//! Experiments (each over shared pretrained models, with fine-tuning
//! repeated across seeds):
//! - extend: base vs extended vs from-scratch bilingual, zero-shot on the
//!   target plus source retention;
//! - convergence: steps until the held-out target MLM loss crosses given
//!   thresholds, extended vs from-scratch.
//!
//! Target-language labels never reach any fine-tuning path; they are read
//! only when scoring predictions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{count_words, RawCorpus};
use crate::model::{extend_model, init_model, ModelConfig, ModelParameters};
use crate::rng::Rng;
use crate::tagger::{
    finetune_ner, init_crf, predict, span_f1, NerConfig, TagSet, TaggedSentence, TaggerError,
};
use crate::tokenizer::unk_rate;
use crate::trainer::{
    build_instance, encode_corpus, eval_loss, PretrainConfig, TrainError, TrainingInstance,
};
use crate::vocab::{extend_vocabulary, induce_vocabulary, VocabError, Vocabulary};

const STREAM_SYNTH_SOURCE: u64 = 0x30;
const STREAM_SYNTH_TARGET: u64 = 0x31;
const STREAM_SYNTH_INVENTORY: u64 = 0x32;
const STREAM_SCRATCH_SUBSAMPLE: u64 = 0x33;
const STREAM_EVAL_INSTANCES: u64 = 0x34;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("source and target alphabets overlap on {shared:?}")]
    AlphabetsOverlap { shared: Vec<char> },
    #[error("target alphabet has {target_len} characters, needs at least {source_len} (one per source character)")]
    TargetAlphabetTooSmall { source_len: usize, target_len: usize },
    #[error("invalid synthetic spec: {reason}")]
    InvalidSpec { reason: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Generator settings for one synthetic language pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub source_alphabet: String,
    pub target_alphabet: String,
    pub entity_types: Vec<String>,
    pub n_common_words: usize,
    pub n_entities_per_type: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub n_source_docs: usize,
    /// The target side is low-resource by default, mirroring the regime
    /// where extending a pretrained model matters most.
    pub n_target_docs: usize,
    pub n_heldout_docs: usize,
    pub doc_sentences_min: usize,
    pub doc_sentences_max: usize,
    pub n_ner_train: usize,
    pub n_ner_dev: usize,
    pub n_ner_test: usize,
    /// Probability that a target-side sentence is verb-final.
    pub perturb_word_order: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            source_alphabet: "abcdefghijklmnopqrstuvwxyz".into(),
            target_alphabet: "абвгдежзийклмнопрстуфхцчшщ".into(),
            entity_types: crate::tagger::DEFAULT_ENTITY_TYPES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            n_common_words: 110,
            n_entities_per_type: 18,
            word_len_min: 2,
            word_len_max: 5,
            n_source_docs: 220,
            n_target_docs: 60,
            n_heldout_docs: 30,
            doc_sentences_min: 4,
            doc_sentences_max: 7,
            n_ner_train: 140,
            n_ner_dev: 40,
            n_ner_test: 120,
            perturb_word_order: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let source: BTreeSet<char> = self.source_alphabet.chars().collect();
        let target: BTreeSet<char> = self.target_alphabet.chars().collect();
        let shared: Vec<char> = source.intersection(&target).copied().collect();
        if !shared.is_empty() {
            return Err(HarnessError::AlphabetsOverlap { shared });
        }
        if target.len() < source.len() {
            return Err(HarnessError::TargetAlphabetTooSmall {
                source_len: source.len(),
                target_len: target.len(),
            });
        }
        let bad = |reason: &str| Err(HarnessError::InvalidSpec { reason: reason.into() });
        if self.entity_types.is_empty() {
            return bad("entity_types must be nonempty");
        }
        if self.word_len_min == 0 || self.word_len_max < self.word_len_min {
            return bad("word lengths must satisfy 1 <= min <= max");
        }
        if self.n_common_words < 30 {
            return bad("n_common_words must be >= 30 to fill all grammar roles");
        }
        if self.doc_sentences_min == 0 || self.doc_sentences_max < self.doc_sentences_min {
            return bad("doc sentence counts must satisfy 1 <= min <= max");
        }
        if self.n_source_docs < 2 || self.n_target_docs < 2 {
            return bad("n_source_docs and n_target_docs must be >= 2 (NSP needs 2+ documents)");
        }
        Ok(())
    }
}

/// One side of the pair: pretraining text, a held-out slice of the same
/// distribution, and labeled NER splits.
#[derive(Debug, Clone)]
pub struct LanguageData {
    pub corpus: RawCorpus,
    pub heldout: RawCorpus,
    pub ner_train: Vec<TaggedSentence>,
    pub ner_dev: Vec<TaggedSentence>,
    pub ner_test: Vec<TaggedSentence>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: LanguageData,
    pub target: LanguageData,
    pub tagset: TagSet,
}

/// Shared word inventory: the source-language lexicon partitioned into
/// grammar roles, plus per-type entity lexicons. The target lexicon is the
/// cipher image of all of it.
struct Inventory {
    determiners: Vec<String>,
    prepositions: Vec<String>,
    verbs: Vec<String>,
    adverbs: Vec<String>,
    nouns: Vec<String>,
    entities: Vec<Vec<Vec<String>>>, // [type][entity] -> words
}

fn generate_inventory(spec: &SynthSpec) -> Inventory {
    let alphabet: Vec<char> = spec.source_alphabet.chars().collect();
    let mut rng = Rng::for_stream(spec.seed, &[STREAM_SYNTH_INVENTORY]);
    let mut seen = BTreeSet::new();
    let mut fresh_word = |rng: &mut Rng| loop {
        let len = spec.word_len_min + rng.below(spec.word_len_max - spec.word_len_min + 1);
        let w: String = (0..len).map(|_| *rng.choose(&alphabet)).collect();
        if seen.insert(w.clone()) {
            return w;
        }
    };

    let mut words: Vec<String> = (0..spec.n_common_words).map(|_| fresh_word(&mut rng)).collect();
    let determiners: Vec<String> = words.drain(..4).collect();
    let prepositions: Vec<String> = words.drain(..6).collect();
    let n_verbs = words.len() * 3 / 10;
    let verbs: Vec<String> = words.drain(..n_verbs).collect();
    let n_adverbs = words.len() / 5;
    let adverbs: Vec<String> = words.drain(..n_adverbs).collect();
    let nouns = words;

    let entities = (0..spec.entity_types.len())
        .map(|_| {
            (0..spec.n_entities_per_type)
                .map(|_| {
                    let two_words = rng.bernoulli(0.6);
                    let n = if two_words { 2 } else { 1 };
                    (0..n).map(|_| fresh_word(&mut rng)).collect()
                })
                .collect()
        })
        .collect();

    Inventory {
        determiners,
        prepositions,
        verbs,
        adverbs,
        nouns,
        entities,
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Det,
    Noun,
    Verb,
    Adverb,
    Prep,
    Entity(usize),
    /// A digit string. Numbers are written identically in both languages
    /// (as in real corpora), giving continued pretraining shared anchor
    /// tokens to align the two lexicons around.
    Num,
    Stop,
}

/// Templated grammar with entity slots in varied positions; leading
/// determiner/noun material keeps absolute position from identifying the
/// entity slots on its own.
const TEMPLATES: &[&[Slot]] = &[
    &[Slot::Entity(0), Slot::Verb, Slot::Det, Slot::Noun, Slot::Prep, Slot::Entity(3), Slot::Stop],
    &[Slot::Det, Slot::Noun, Slot::Prep, Slot::Entity(1), Slot::Verb, Slot::Entity(0), Slot::Stop],
    &[Slot::Entity(0), Slot::Verb, Slot::Prep, Slot::Entity(2), Slot::Stop],
    &[Slot::Entity(1), Slot::Verb, Slot::Det, Slot::Noun, Slot::Stop],
    &[Slot::Det, Slot::Noun, Slot::Verb, Slot::Adverb, Slot::Stop],
    &[Slot::Entity(0), Slot::Verb, Slot::Entity(0), Slot::Prep, Slot::Entity(3), Slot::Stop],
    &[Slot::Adverb, Slot::Entity(2), Slot::Noun, Slot::Verb, Slot::Det, Slot::Noun, Slot::Stop],
    &[Slot::Det, Slot::Noun, Slot::Verb, Slot::Prep, Slot::Entity(3), Slot::Adverb, Slot::Stop],
    &[Slot::Num, Slot::Noun, Slot::Verb, Slot::Prep, Slot::Entity(2), Slot::Stop],
    &[Slot::Entity(0), Slot::Verb, Slot::Num, Slot::Noun, Slot::Adverb, Slot::Stop],
    &[Slot::Det, Slot::Noun, Slot::Prep, Slot::Num, Slot::Verb, Slot::Stop],
];

fn generate_sentence(
    inv: &Inventory,
    spec: &SynthSpec,
    rng: &mut Rng,
    verb_final: bool,
) -> (Vec<String>, Vec<String>) {
    let template = TEMPLATES[rng.below(TEMPLATES.len())];
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut verb_span: Option<usize> = None;
    for slot in template {
        match slot {
            Slot::Det => {
                words.push(rng.choose(&inv.determiners).clone());
                tags.push("O".to_string());
            }
            Slot::Noun => {
                words.push(rng.choose(&inv.nouns).clone());
                tags.push("O".to_string());
            }
            Slot::Verb => {
                verb_span = Some(words.len());
                words.push(rng.choose(&inv.verbs).clone());
                tags.push("O".to_string());
            }
            Slot::Adverb => {
                words.push(rng.choose(&inv.adverbs).clone());
                tags.push("O".to_string());
            }
            Slot::Prep => {
                words.push(rng.choose(&inv.prepositions).clone());
                tags.push("O".to_string());
            }
            Slot::Entity(t) => {
                let t = t % spec.entity_types.len();
                let entity = rng.choose(&inv.entities[t]);
                for (i, w) in entity.iter().enumerate() {
                    words.push(w.clone());
                    let prefix = if i == 0 { "B" } else { "I" };
                    tags.push(format!("{prefix}-{}", spec.entity_types[t]));
                }
            }
            Slot::Num => {
                words.push(rng.below(100).to_string());
                tags.push("O".to_string());
            }
            Slot::Stop => {
                words.push(".".to_string());
                tags.push("O".to_string());
            }
        }
    }
    // Target-style word order: move the verb to the end (before the stop).
    if verb_final {
        if let Some(v) = verb_span {
            let w = words.remove(v);
            let t = tags.remove(v);
            let at = words.len() - 1;
            words.insert(at, w);
            tags.insert(at, t);
        }
    }
    (words, tags)
}

fn apply_cipher(word: &str, cipher: &std::collections::HashMap<char, char>) -> String {
    word.chars().map(|c| *cipher.get(&c).unwrap_or(&c)).collect()
}

struct SideParams {
    stream: u64,
    cipher: Option<std::collections::HashMap<char, char>>,
    perturb: f64,
    n_docs: usize,
}

fn generate_side(
    spec: &SynthSpec,
    inv: &Inventory,
    tagset: &TagSet,
    side: &SideParams,
    tag: &str,
) -> Result<LanguageData, HarnessError> {
    let mut rng = Rng::for_stream(spec.seed, &[side.stream]);
    let sentence = |rng: &mut Rng| -> (Vec<String>, Vec<String>) {
        let verb_final = side.perturb > 0.0 && rng.bernoulli(side.perturb);
        let (mut words, tags) = generate_sentence(inv, spec, rng, verb_final);
        if let Some(cipher) = &side.cipher {
            for w in words.iter_mut() {
                *w = apply_cipher(w, cipher);
            }
        }
        (words, tags)
    };

    let mut docs = Vec::with_capacity(side.n_docs);
    for _ in 0..side.n_docs {
        let n = spec.doc_sentences_min
            + rng.below(spec.doc_sentences_max - spec.doc_sentences_min + 1);
        docs.push((0..n).map(|_| sentence(&mut rng).0.join(" ")).collect());
    }
    let corpus = RawCorpus::new(docs, tag);

    let mut heldout_docs = Vec::with_capacity(spec.n_heldout_docs);
    for _ in 0..spec.n_heldout_docs {
        let n = spec.doc_sentences_min
            + rng.below(spec.doc_sentences_max - spec.doc_sentences_min + 1);
        heldout_docs.push((0..n).map(|_| sentence(&mut rng).0.join(" ")).collect());
    }
    let heldout = RawCorpus::new(heldout_docs, format!("{tag}-heldout"));

    let labeled = |n: usize, rng: &mut Rng| -> Result<Vec<TaggedSentence>, HarnessError> {
        (0..n)
            .map(|_| {
                let (words, tags) = sentence(rng);
                Ok(TaggedSentence::new(words, tags, tagset)?)
            })
            .collect()
    };
    let ner_train = labeled(spec.n_ner_train, &mut rng)?;
    let ner_dev = labeled(spec.n_ner_dev, &mut rng)?;
    let ner_test = labeled(spec.n_ner_test, &mut rng)?;

    Ok(LanguageData {
        corpus,
        heldout,
        ner_train,
        ner_dev,
        ner_test,
    })
}

/// Generates the language pair: deterministic in `spec.seed`; errors if the
/// alphabets overlap.
pub fn generate_synthetic_pair(spec: &SynthSpec) -> Result<SyntheticPair, HarnessError> {
    spec.validate()?;
    let tagset = TagSet {
        entity_types: spec.entity_types.clone(),
    };
    let inv = generate_inventory(spec);
    let cipher: std::collections::HashMap<char, char> = spec
        .source_alphabet
        .chars()
        .zip(spec.target_alphabet.chars())
        .collect();

    let source = generate_side(
        spec,
        &inv,
        &tagset,
        &SideParams {
            stream: STREAM_SYNTH_SOURCE,
            cipher: None,
            perturb: 0.0,
            n_docs: spec.n_source_docs,
        },
        "source",
    )?;
    let target = generate_side(
        spec,
        &inv,
        &tagset,
        &SideParams {
            stream: STREAM_SYNTH_TARGET,
            cipher: Some(cipher),
            perturb: spec.perturb_word_order,
            n_docs: spec.n_target_docs,
        },
        "target",
    )?;
    Ok(SyntheticPair {
        source,
        target,
        tagset,
    })
}

// ---------------------------------------------------------------------------
// Experiments.
// ---------------------------------------------------------------------------

/// Budgets and dimensions for the scripted experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_seeds: usize,
    pub base_vocab_size: usize,
    /// Pre-filter candidate size for the extension (the paper-scale
    /// operating point is 30000; desk scale uses a few hundred).
    pub new_size_goal: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_position: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub base_steps: u64,
    pub base_lr: f64,
    pub extend_steps: u64,
    pub extend_lr: f64,
    pub scratch_steps: u64,
    pub scratch_lr: f64,
    pub nsp_enabled: bool,
    pub ner_epochs: usize,
    pub ner_lr: f64,
    pub ner_batch_size: usize,
    pub log_interval: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 11,
            n_seeds: 5,
            base_vocab_size: 700,
            new_size_goal: 400,
            hidden_size: 48,
            layers: 2,
            heads: 4,
            ff_dim: 192,
            max_position: 40,
            dropout: 0.1,
            batch_size: 16,
            max_seq_len: 32,
            base_steps: 600,
            base_lr: 1e-3,
            extend_steps: 300,
            extend_lr: 3e-4,
            scratch_steps: 900,
            scratch_lr: 1e-3,
            nsp_enabled: true,
            ner_epochs: 10,
            ner_lr: 1e-3,
            ner_batch_size: 8,
            log_interval: 50,
        }
    }
}

impl ExperimentConfig {
    fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_position: self.max_position,
            type_vocab: 2,
            dropout: self.dropout,
            seed,
        }
    }

    fn pretrain_config(&self, steps: u64, lr: f64, seed: u64) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.batch_size,
            learning_rate: lr,
            steps,
            max_seq_len: self.max_seq_len,
            nsp_enabled: self.nsp_enabled,
            seed,
            log_interval: self.log_interval,
            ..PretrainConfig::with_budget(steps, lr, seed)
        }
    }

    fn ner_config(&self, seed: u64) -> NerConfig {
        NerConfig {
            epochs: self.ner_epochs,
            learning_rate: self.ner_lr,
            batch_size: self.ner_batch_size,
            max_seq_len: self.max_seq_len,
            seed,
            freeze_encoder: false,
            lowercase: true,
            warmup_steps: 0,
        }
    }
}

/// Per-condition zero-shot outcome over the fine-tuning seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub seeds: Vec<u64>,
    pub precision_per_seed: Vec<f64>,
    pub recall_per_seed: Vec<f64>,
    pub f1_per_seed: Vec<f64>,
    pub mean_f1: f64,
    /// Pretraining loss curve of the underlying model (shared by seeds).
    pub loss_curve: Vec<(u64, f64)>,
}

impl ConditionResult {
    fn from_runs(
        condition: &str,
        seeds: Vec<u64>,
        runs: Vec<(f64, f64, f64)>,
        loss_curve: Vec<(u64, f64)>,
    ) -> Self {
        let f1: Vec<f64> = runs.iter().map(|r| r.2).collect();
        let mean_f1 = f1.iter().sum::<f64>() / f1.len() as f64;
        ConditionResult {
            condition: condition.to_string(),
            seeds,
            precision_per_seed: runs.iter().map(|r| r.0).collect(),
            recall_per_seed: runs.iter().map(|r| r.1).collect(),
            f1_per_seed: f1,
            mean_f1,
            loss_curve,
        }
    }
}

/// Everything the extend experiment measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtendOutcome {
    /// Zero-shot on target: base model (no extension).
    pub base_target: ConditionResult,
    /// Zero-shot on target: extended model.
    pub extended_target: ConditionResult,
    /// Zero-shot on target: from-scratch bilingual model.
    pub scratch_target: ConditionResult,
    /// Source-language evaluation of the base model (retention baseline).
    pub base_source: ConditionResult,
    /// Source-language evaluation of the extended model (retention).
    pub extended_source: ConditionResult,
    /// Content-word UNK rate of the target corpus under the base vocab.
    pub unk_rate_base: f64,
    /// Same corpus under the extended vocab.
    pub unk_rate_extended: f64,
    pub base_vocab_size: usize,
    pub appended_count: usize,
}

/// The trained models and vocabularies the conditions share; exposed so the
/// convergence experiment and the CLI can reuse them.
pub struct PreparedModels {
    pub base_vocab: Vocabulary,
    pub base_params: ModelParameters<f32>,
    pub base_loss: Vec<(u64, f64)>,
    pub extended_vocab: Vocabulary,
    pub extended_init: ModelParameters<f32>,
    pub extended_params: ModelParameters<f32>,
    pub extended_loss: Vec<(u64, f64)>,
    pub scratch_vocab: Vocabulary,
    pub scratch_params: ModelParameters<f32>,
    pub scratch_loss: Vec<(u64, f64)>,
    pub appended_count: usize,
}

/// Subsamples source text 1:1 with the target by line count (the ratio the
/// from-scratch baseline uses; recorded in run metadata, not asserted).
pub fn mixed_bilingual_corpus(source: &RawCorpus, target: &RawCorpus, seed: u64) -> RawCorpus {
    let target_lines = target.sentence_count();
    let mut order: Vec<usize> = (0..source.documents.len()).collect();
    let mut rng = Rng::for_stream(seed, &[STREAM_SCRATCH_SUBSAMPLE]);
    rng.shuffle(&mut order);
    let mut docs: Vec<Vec<String>> = Vec::new();
    let mut taken = 0usize;
    for &d in &order {
        if taken >= target_lines {
            break;
        }
        let doc = &source.documents[d];
        let take = doc.len().min(target_lines - taken);
        docs.push(doc[..take].to_vec());
        taken += take;
    }
    docs.extend(target.documents.iter().cloned());
    RawCorpus::new(docs, format!("{}+{}", source.language_tag, target.language_tag))
}

/// Builds vocabularies and runs the three pretraining regimes.
pub fn prepare_models(
    pair: &SyntheticPair,
    cfg: &ExperimentConfig,
) -> Result<PreparedModels, HarnessError> {
    let source_counts = count_words(&pair.source.corpus, true);
    let target_counts = count_words(&pair.target.corpus, true);
    let specials: Vec<String> = crate::vocab::SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .collect();

    // Base: induce on source, pretrain on source.
    let base_vocab = induce_vocabulary(&source_counts, cfg.base_vocab_size, &specials)?
        .vocabulary;
    let base_init = init_model(&cfg.model_config(base_vocab.len(), cfg.seed))?;
    let (base_params, base_loss) = crate::trainer::pretrain(
        base_init,
        &pair.source.corpus,
        &base_vocab,
        &cfg.pretrain_config(cfg.base_steps, cfg.base_lr, cfg.seed),
    )?;

    // Extended: filter-and-append vocabulary, surgery, continue on target.
    let (extended_vocab, extension) =
        extend_vocabulary(&base_vocab, &target_counts, cfg.new_size_goal)?;
    let extended_init = extend_model(
        &base_params,
        base_vocab.len(),
        extension.appended_count(),
        cfg.seed ^ 0xE,
    )?;
    let (extended_params, extended_loss) = crate::trainer::pretrain(
        extended_init.clone(),
        &pair.target.corpus,
        &extended_vocab,
        &cfg.pretrain_config(cfg.extend_steps, cfg.extend_lr, cfg.seed ^ 0xE1),
    )?;

    // From-scratch bilingual: joint vocabulary sized to match the extended
    // one, fresh weights, mixed corpus.
    let mixed = mixed_bilingual_corpus(&pair.source.corpus, &pair.target.corpus, cfg.seed);
    let mixed_counts = count_words(&mixed, true);
    let scratch_vocab =
        induce_vocabulary(&mixed_counts, extended_vocab.len(), &specials)?.vocabulary;
    let scratch_init = init_model(&cfg.model_config(scratch_vocab.len(), cfg.seed ^ 0x5C))?;
    let (scratch_params, scratch_loss) = crate::trainer::pretrain(
        scratch_init,
        &mixed,
        &scratch_vocab,
        &cfg.pretrain_config(cfg.scratch_steps, cfg.scratch_lr, cfg.seed ^ 0x5C1),
    )?;

    Ok(PreparedModels {
        base_vocab,
        base_params,
        base_loss,
        extended_vocab,
        extended_init,
        extended_params,
        extended_loss,
        scratch_vocab,
        scratch_params,
        scratch_loss,
        appended_count: extension.appended_count(),
    })
}

/// Fine-tunes on source labels with `seed`, then scores zero-shot on the
/// given evaluation set.
fn finetune_and_eval(
    params: &ModelParameters<f32>,
    vocab: &Vocabulary,
    pair: &SyntheticPair,
    eval_set: &[TaggedSentence],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<((f64, f64, f64), FinetunedTagger), HarnessError> {
    let ner_cfg = cfg.ner_config(seed);
    let crf = init_crf(cfg.hidden_size, &pair.tagset, seed);
    let (tuned, tuned_crf, log) = finetune_ner(
        params,
        &crf,
        &pair.source.ner_train,
        vocab,
        &pair.tagset,
        &ner_cfg,
    )?;
    let metrics = evaluate_tagger(&tuned, &tuned_crf, vocab, &pair.tagset, &ner_cfg, eval_set)?;
    Ok((
        metrics,
        FinetunedTagger {
            params: tuned,
            crf: tuned_crf,
            loss_log: log,
            ner_cfg,
        },
    ))
}

pub struct FinetunedTagger {
    pub params: ModelParameters<f32>,
    pub crf: crate::tagger::CrfParameters<f32>,
    pub loss_log: Vec<(u64, f64)>,
    pub ner_cfg: NerConfig,
}

pub fn evaluate_tagger(
    params: &ModelParameters<f32>,
    crf: &crate::tagger::CrfParameters<f32>,
    vocab: &Vocabulary,
    tagset: &TagSet,
    ner_cfg: &NerConfig,
    eval_set: &[TaggedSentence],
) -> Result<(f64, f64, f64), HarnessError> {
    let mut predictions = Vec::with_capacity(eval_set.len());
    for sentence in eval_set {
        let tags = predict(params, crf, &sentence.words, vocab, tagset, ner_cfg)?;
        predictions.push(TaggedSentence {
            words: sentence.words.clone(),
            tags,
        });
    }
    Ok(span_f1(&predictions, eval_set)?)
}

/// Callback invoked per (condition, seed) with the fine-tuned tagger, so
/// callers can persist checkpoints without the harness knowing about disk
/// layout.
pub type SeedSink<'a> = dyn FnMut(&str, u64, &FinetunedTagger) + 'a;

/// The four-condition experiment: (a) base zero-shot on target,
/// (b) extended zero-shot on target, (c) from-scratch bilingual zero-shot
/// on target, (d) retention — base and extended evaluated on source.
/// Fine-tuning runs once per seed per condition over the shared pretrained
/// models, matching the protocol of averaging NER runs across seeds.
pub fn run_extend_experiment(
    pair: &SyntheticPair,
    cfg: &ExperimentConfig,
    models: &PreparedModels,
    mut sink: Option<&mut SeedSink<'_>>,
) -> Result<ExtendOutcome, HarnessError> {
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|i| cfg.seed + 1000 * (i + 1)).collect();

    let unk_rate_base = unk_rate(
        pair.target.corpus.sentences(),
        &models.base_vocab,
        true,
        true,
    )
    .unwrap_or(0.0);
    let unk_rate_extended = unk_rate(
        pair.target.corpus.sentences(),
        &models.extended_vocab,
        true,
        true,
    )
    .unwrap_or(0.0);

    let mut base_target_runs = Vec::new();
    let mut base_source_runs = Vec::new();
    let mut extended_target_runs = Vec::new();
    let mut extended_source_runs = Vec::new();
    let mut scratch_target_runs = Vec::new();

    for &seed in &seeds {
        let (target_metrics, tagger) = finetune_and_eval(
            &models.base_params,
            &models.base_vocab,
            pair,
            &pair.target.ner_test,
            cfg,
            seed,
        )?;
        let source_metrics = evaluate_tagger(
            &tagger.params,
            &tagger.crf,
            &models.base_vocab,
            &pair.tagset,
            &tagger.ner_cfg,
            &pair.source.ner_test,
        )?;
        if let Some(sink) = sink.as_deref_mut() {
            sink("base", seed, &tagger);
        }
        base_target_runs.push(target_metrics);
        base_source_runs.push(source_metrics);

        let (target_metrics, tagger) = finetune_and_eval(
            &models.extended_params,
            &models.extended_vocab,
            pair,
            &pair.target.ner_test,
            cfg,
            seed,
        )?;
        let source_metrics = evaluate_tagger(
            &tagger.params,
            &tagger.crf,
            &models.extended_vocab,
            &pair.tagset,
            &tagger.ner_cfg,
            &pair.source.ner_test,
        )?;
        if let Some(sink) = sink.as_deref_mut() {
            sink("extended", seed, &tagger);
        }
        extended_target_runs.push(target_metrics);
        extended_source_runs.push(source_metrics);

        let (target_metrics, tagger) = finetune_and_eval(
            &models.scratch_params,
            &models.scratch_vocab,
            pair,
            &pair.target.ner_test,
            cfg,
            seed,
        )?;
        if let Some(sink) = sink.as_deref_mut() {
            sink("scratch", seed, &tagger);
        }
        scratch_target_runs.push(target_metrics);
    }

    Ok(ExtendOutcome {
        base_target: ConditionResult::from_runs(
            "base-target",
            seeds.clone(),
            base_target_runs,
            models.base_loss.clone(),
        ),
        extended_target: ConditionResult::from_runs(
            "extended-target",
            seeds.clone(),
            extended_target_runs,
            models.extended_loss.clone(),
        ),
        scratch_target: ConditionResult::from_runs(
            "scratch-target",
            seeds.clone(),
            scratch_target_runs,
            models.scratch_loss.clone(),
        ),
        base_source: ConditionResult::from_runs(
            "base-source",
            seeds.clone(),
            base_source_runs,
            models.base_loss.clone(),
        ),
        extended_source: ConditionResult::from_runs(
            "extended-source",
            seeds,
            extended_source_runs,
            models.extended_loss.clone(),
        ),
        unk_rate_base,
        unk_rate_extended,
        base_vocab_size: models.base_vocab.len(),
        appended_count: models.appended_count,
    })
}

/// Fixed masked instances over the held-out target text, for comparable
/// MLM loss across checkpoints of one condition.
pub fn heldout_eval_instances(
    heldout: &RawCorpus,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    n_instances: usize,
) -> Result<Vec<TrainingInstance>, HarnessError> {
    let enc = encode_corpus(heldout, vocab, cfg.lowercase);
    let eval_cfg = PretrainConfig {
        nsp_enabled: false,
        seed: crate::rng::derive_seed(cfg.seed, &[STREAM_EVAL_INSTANCES]),
        ..cfg.clone()
    };
    let mut out = Vec::with_capacity(n_instances);
    let mut index = 0u64;
    while out.len() < n_instances {
        let inst = build_instance(&enc, vocab, &eval_cfg, index)?;
        if !inst.mlm_positions.is_empty() {
            out.push(inst);
        }
        index += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceCondition {
    pub condition: String,
    /// (threshold, first step at or below it; None = not reached within
    /// budget).
    pub steps_to_threshold: Vec<(f64, Option<u64>)>,
    pub eval_curve: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceOutcome {
    pub thresholds: Vec<f64>,
    pub extended: ConvergenceCondition,
    pub scratch: ConvergenceCondition,
    pub budget_steps: u64,
}

fn steps_to_thresholds(
    curve: &[(u64, f64)],
    thresholds: &[f64],
) -> Vec<(f64, Option<u64>)> {
    thresholds
        .iter()
        .map(|&th| {
            let step = curve.iter().find(|(_, loss)| *loss <= th).map(|(s, _)| *s);
            (th, step)
        })
        .collect()
}

/// Trains a model while evaluating held-out MLM loss every
/// `eval_interval` steps; returns the eval curve.
fn train_with_eval_curve(
    params: ModelParameters<f32>,
    corpus: &RawCorpus,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    eval_instances: &[TrainingInstance],
    eval_interval: u64,
) -> Result<Vec<(u64, f64)>, HarnessError> {
    let mut curve = vec![(0, eval_loss(&params, eval_instances)?.mlm)];
    let mut current = params;
    let mut done = 0u64;
    while done < cfg.steps {
        let chunk = eval_interval.min(cfg.steps - done);
        // Seed the chunk so instance streams continue from `done`.
        let chunk_cfg = PretrainConfig {
            steps: chunk,
            seed: crate::rng::derive_seed(cfg.seed, &[0xC, done]),
            ..cfg.clone()
        };
        let (next, _) = crate::trainer::pretrain(current, corpus, vocab, &chunk_cfg)?;
        current = next;
        done += chunk;
        curve.push((done, eval_loss(&current, eval_instances)?.mlm));
    }
    Ok(curve)
}

/// Convergence comparison: the extended model continuing on target text vs
/// the from-scratch bilingual model on its mixed corpus, both tracked by
/// held-out target MLM loss (each under its own vocabulary/encoding of the
/// shared held-out text).
pub fn run_convergence_experiment(
    pair: &SyntheticPair,
    cfg: &ExperimentConfig,
    models: &PreparedModels,
    thresholds: &[f64],
    budget_steps: u64,
    eval_interval: u64,
    n_eval_instances: usize,
) -> Result<ConvergenceOutcome, HarnessError> {
    let extend_cfg = PretrainConfig {
        steps: budget_steps,
        ..cfg.pretrain_config(budget_steps, cfg.extend_lr, cfg.seed ^ 0xE1)
    };
    let eval_extended = heldout_eval_instances(
        &pair.target.heldout,
        &models.extended_vocab,
        &extend_cfg,
        n_eval_instances,
    )?;
    let extended_curve = train_with_eval_curve(
        models.extended_init.clone(),
        &pair.target.corpus,
        &models.extended_vocab,
        &extend_cfg,
        &eval_extended,
        eval_interval,
    )?;

    let scratch_cfg = PretrainConfig {
        steps: budget_steps,
        ..cfg.pretrain_config(budget_steps, cfg.scratch_lr, cfg.seed ^ 0x5C1)
    };
    let mixed = mixed_bilingual_corpus(&pair.source.corpus, &pair.target.corpus, cfg.seed);
    let eval_scratch = heldout_eval_instances(
        &pair.target.heldout,
        &models.scratch_vocab,
        &scratch_cfg,
        n_eval_instances,
    )?;
    let scratch_init = init_model(&cfg.model_config(models.scratch_vocab.len(), cfg.seed ^ 0x5C))?;
    let scratch_curve = train_with_eval_curve(
        scratch_init,
        &mixed,
        &models.scratch_vocab,
        &scratch_cfg,
        &eval_scratch,
        eval_interval,
    )?;

    Ok(ConvergenceOutcome {
        thresholds: thresholds.to_vec(),
        extended: ConvergenceCondition {
            condition: "extended".into(),
            steps_to_threshold: steps_to_thresholds(&extended_curve, thresholds),
            eval_curve: extended_curve,
        },
        scratch: ConvergenceCondition {
            condition: "scratch".into(),
            steps_to_threshold: steps_to_thresholds(&scratch_curve, thresholds),
            eval_curve: scratch_curve,
        },
        budget_steps,
    })
}
