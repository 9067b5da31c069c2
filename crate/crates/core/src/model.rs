//! A small BERT-style transformer encoder with tied MLM decoder and NSP
//! head, plus the vocabulary-extension surgery on its embedding matrices.
//!
//! Architecture: post-layer-norm transformer blocks, GELU (tanh form),
//! learned absolute position embeddings, attention scaled by 1/sqrt(d/heads).
//! The MLM decoder reuses the token embedding matrix (weight tying) — there
//! is no separate output matrix, only a per-token output bias.
//!
//! `extend_model` grows the token embedding by `appended_count` rows drawn
//! truncated-normal(0, 0.02) and zero-extends the decoder bias; every other
//! tensor is carried over bit-for-bit, which is what makes pre-extension
//! MLM logits over old vocabulary columns invariant.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::rng::Rng;

/// Weight init: truncated normal std and cutoff, per BERT convention.
pub const INIT_STD: f64 = 0.02;
pub const INIT_CUTOFF_SIGMAS: f64 = 2.0;
const LAYER_NORM_EPS: f64 = 1e-12;
const ATTENTION_MASK_BIAS: f64 = -1e9;

const STREAM_INIT: u64 = 0x01;
const STREAM_EXTEND: u64 = 0x02;
const STREAM_DROPOUT: u64 = 0x03;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("token id {id} out of range (vocab size {vocab_size})")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_position {max_position}")]
    PositionOutOfRange { len: usize, max_position: usize },
    #[error("segment id {id} out of range (type vocab {type_vocab})")]
    SegmentOutOfRange { id: u8, type_vocab: usize },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_position: usize,
    pub type_vocab: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; every invariant in this crate is scale-free.
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            hidden_size: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_position: 64,
            type_vocab: 2,
            dropout: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.vocab_size < 5 {
            return fail(format!(
                "vocab_size {} must hold at least the 5 special tokens",
                self.vocab_size
            ));
        }
        if self.hidden_size == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return fail("hidden_size, layers, heads, ff_dim must all be >= 1".into());
        }
        if self.hidden_size % self.heads != 0 {
            return fail(format!(
                "hidden_size {} not divisible by heads {}",
                self.hidden_size, self.heads
            ));
        }
        if self.max_position == 0 {
            return fail("max_position must be >= 1".into());
        }
        if self.type_vocab != 2 {
            return fail(format!("type_vocab must be 2, got {}", self.type_vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F: Scalar> {
    pub weight: Array2<F>, // in × out
    pub bias: Array2<F>,   // 1 × out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F: Scalar> {
    pub gamma: Array2<F>, // 1 × n
    pub beta: Array2<F>,  // 1 × n
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F: Scalar> {
    pub attn_query: Dense<F>,
    pub attn_key: Dense<F>,
    pub attn_value: Dense<F>,
    pub attn_output: Dense<F>,
    pub attn_norm: LayerNormParams<F>,
    pub ff_inner: Dense<F>,
    pub ff_output: Dense<F>,
    pub ff_norm: LayerNormParams<F>,
}

/// All model tensors. The decoder weight is identically `token_embedding`
/// (weight tying): no separate output matrix exists anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F: Scalar> {
    pub config: ModelConfig,
    pub token_embedding: Array2<F>,    // V × d
    pub position_embedding: Array2<F>, // max_position × d
    pub segment_embedding: Array2<F>,  // 2 × d
    pub embed_norm: LayerNormParams<F>,
    pub layers: Vec<EncoderLayer<F>>,
    pub mlm_transform: Dense<F>, // d × d
    pub mlm_norm: LayerNormParams<F>,
    pub decoder_bias: Array2<F>, // 1 × V
    pub pooler: Dense<F>,        // d × d
    pub nsp: Dense<F>,           // d × 2
}

impl<F: Scalar> ModelParameters<F> {
    /// Visits every tensor with its canonical name, in the canonical order.
    /// This order defines checkpoint layout, optimizer state alignment, and
    /// autograd slot assignment.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a Array2<F>)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        f("segment_embedding", &self.segment_embedding);
        f("embeddings.norm.gamma", &self.embed_norm.gamma);
        f("embeddings.norm.beta", &self.embed_norm.beta);
        for (i, layer) in self.layers.iter().enumerate() {
            let dense = [
                ("attention.query", &layer.attn_query),
                ("attention.key", &layer.attn_key),
                ("attention.value", &layer.attn_value),
                ("attention.output", &layer.attn_output),
            ];
            for (name, d) in dense {
                f(&format!("layer.{i}.{name}.weight"), &d.weight);
                f(&format!("layer.{i}.{name}.bias"), &d.bias);
            }
            f(&format!("layer.{i}.attention.norm.gamma"), &layer.attn_norm.gamma);
            f(&format!("layer.{i}.attention.norm.beta"), &layer.attn_norm.beta);
            f(&format!("layer.{i}.ff.inner.weight"), &layer.ff_inner.weight);
            f(&format!("layer.{i}.ff.inner.bias"), &layer.ff_inner.bias);
            f(&format!("layer.{i}.ff.output.weight"), &layer.ff_output.weight);
            f(&format!("layer.{i}.ff.output.bias"), &layer.ff_output.bias);
            f(&format!("layer.{i}.ff.norm.gamma"), &layer.ff_norm.gamma);
            f(&format!("layer.{i}.ff.norm.beta"), &layer.ff_norm.beta);
        }
        f("mlm.transform.weight", &self.mlm_transform.weight);
        f("mlm.transform.bias", &self.mlm_transform.bias);
        f("mlm.norm.gamma", &self.mlm_norm.gamma);
        f("mlm.norm.beta", &self.mlm_norm.beta);
        f("decoder_bias", &self.decoder_bias);
        f("pooler.weight", &self.pooler.weight);
        f("pooler.bias", &self.pooler.bias);
        f("nsp.weight", &self.nsp.weight);
        f("nsp.bias", &self.nsp.bias);
    }

    /// Mutable twin of [`visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<F>)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        f("segment_embedding", &mut self.segment_embedding);
        f("embeddings.norm.gamma", &mut self.embed_norm.gamma);
        f("embeddings.norm.beta", &mut self.embed_norm.beta);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let dense = [
                ("attention.query", &mut layer.attn_query),
                ("attention.key", &mut layer.attn_key),
                ("attention.value", &mut layer.attn_value),
                ("attention.output", &mut layer.attn_output),
            ];
            for (name, d) in dense {
                f(&format!("layer.{i}.{name}.weight"), &mut d.weight);
                f(&format!("layer.{i}.{name}.bias"), &mut d.bias);
            }
            f(&format!("layer.{i}.attention.norm.gamma"), &mut layer.attn_norm.gamma);
            f(&format!("layer.{i}.attention.norm.beta"), &mut layer.attn_norm.beta);
            f(&format!("layer.{i}.ff.inner.weight"), &mut layer.ff_inner.weight);
            f(&format!("layer.{i}.ff.inner.bias"), &mut layer.ff_inner.bias);
            f(&format!("layer.{i}.ff.output.weight"), &mut layer.ff_output.weight);
            f(&format!("layer.{i}.ff.output.bias"), &mut layer.ff_output.bias);
            f(&format!("layer.{i}.ff.norm.gamma"), &mut layer.ff_norm.gamma);
            f(&format!("layer.{i}.ff.norm.beta"), &mut layer.ff_norm.beta);
        }
        f("mlm.transform.weight", &mut self.mlm_transform.weight);
        f("mlm.transform.bias", &mut self.mlm_transform.bias);
        f("mlm.norm.gamma", &mut self.mlm_norm.gamma);
        f("mlm.norm.beta", &mut self.mlm_norm.beta);
        f("decoder_bias", &mut self.decoder_bias);
        f("pooler.weight", &mut self.pooler.weight);
        f("pooler.bias", &mut self.pooler.bias);
        f("nsp.weight", &mut self.nsp.weight);
        f("nsp.bias", &mut self.nsp.bias);
    }

    pub fn named_tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        self.visit(|name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    /// Precision conversion (f32 checkpoints → f64 test mode and back).
    pub fn convert<G: Scalar>(&self) -> ModelParameters<G> {
        let conv = |a: &Array2<F>| a.mapv(|x| G::from_f64(x.to_f64()));
        let dense = |d: &Dense<F>| Dense {
            weight: conv(&d.weight),
            bias: conv(&d.bias),
        };
        let norm = |n: &LayerNormParams<F>| LayerNormParams {
            gamma: conv(&n.gamma),
            beta: conv(&n.beta),
        };
        ModelParameters {
            config: self.config.clone(),
            token_embedding: conv(&self.token_embedding),
            position_embedding: conv(&self.position_embedding),
            segment_embedding: conv(&self.segment_embedding),
            embed_norm: norm(&self.embed_norm),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    attn_query: dense(&l.attn_query),
                    attn_key: dense(&l.attn_key),
                    attn_value: dense(&l.attn_value),
                    attn_output: dense(&l.attn_output),
                    attn_norm: norm(&l.attn_norm),
                    ff_inner: dense(&l.ff_inner),
                    ff_output: dense(&l.ff_output),
                    ff_norm: norm(&l.ff_norm),
                })
                .collect(),
            mlm_transform: dense(&self.mlm_transform),
            mlm_norm: norm(&self.mlm_norm),
            decoder_bias: conv(&self.decoder_bias),
            pooler: dense(&self.pooler),
            nsp: dense(&self.nsp),
        }
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Zero-filled parameters with the shapes `cfg` dictates; the template the
/// checkpoint loader fills in.
pub(crate) fn zero_shapes<F: Scalar>(cfg: &ModelConfig) -> ModelParameters<F> {
    let d = cfg.hidden_size;
    let dense = |rows: usize, cols: usize| Dense {
        weight: Array2::zeros((rows, cols)),
        bias: Array2::zeros((1, cols)),
    };
    let norm = || LayerNormParams {
        gamma: Array2::zeros((1, d)),
        beta: Array2::zeros((1, d)),
    };
    ModelParameters {
        config: cfg.clone(),
        token_embedding: Array2::zeros((cfg.vocab_size, d)),
        position_embedding: Array2::zeros((cfg.max_position, d)),
        segment_embedding: Array2::zeros((cfg.type_vocab, d)),
        embed_norm: norm(),
        layers: (0..cfg.layers)
            .map(|_| EncoderLayer {
                attn_query: dense(d, d),
                attn_key: dense(d, d),
                attn_value: dense(d, d),
                attn_output: dense(d, d),
                attn_norm: norm(),
                ff_inner: dense(d, cfg.ff_dim),
                ff_output: dense(cfg.ff_dim, d),
                ff_norm: norm(),
            })
            .collect(),
        mlm_transform: dense(d, d),
        mlm_norm: norm(),
        decoder_bias: Array2::zeros((1, cfg.vocab_size)),
        pooler: dense(d, d),
        nsp: dense(d, 2),
    }
}

/// True for tensors initialized to zero (biases and layer-norm shifts).
fn is_zero_init(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".beta") || name == "decoder_bias"
}

/// True for tensors initialized to one (layer-norm scales).
fn is_one_init(name: &str) -> bool {
    name.ends_with(".gamma")
}

/// Fresh parameters: weights truncated-normal(0, 0.02) clipped at ±2σ,
/// biases and layer-norm shifts zero, layer-norm scales one. Each tensor
/// draws from its own name-keyed substream of `cfg.seed`, so results are
/// deterministic and independent of visit order.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParameters<f32>, ModelError> {
    cfg.validate()?;
    let mut params = zero_shapes::<f32>(cfg);
    let seed = cfg.seed;
    params.visit_mut(|name, tensor| {
        if is_zero_init(name) {
            // Already zero.
        } else if is_one_init(name) {
            tensor.fill(1.0);
        } else {
            let mut rng = Rng::for_stream(seed, &[STREAM_INIT, fnv1a(name)]);
            tensor.mapv_inplace(|_| {
                rng.truncated_normal(INIT_STD, INIT_CUTOFF_SIGMAS) as f32
            });
        }
    });
    Ok(params)
}

/// The embedding surgery: token_embedding gains `appended_count` rows drawn
/// truncated-normal(0, 0.02) from `seed`, decoder_bias gains that many
/// zeros, and every other tensor — rows 0..base_V included — is carried
/// over bit-for-bit. Weight tying is preserved by construction.
pub fn extend_model(
    params: &ModelParameters<f32>,
    base_vocab_size: usize,
    appended_count: usize,
    seed: u64,
) -> Result<ModelParameters<f32>, ModelError> {
    if params.token_embedding.nrows() != base_vocab_size
        || params.config.vocab_size != base_vocab_size
    {
        return Err(ModelError::ShapeMismatch {
            what: "token_embedding rows".into(),
            expected: base_vocab_size.to_string(),
            found: params.token_embedding.nrows().to_string(),
        });
    }
    let d = params.config.hidden_size;
    let new_v = base_vocab_size + appended_count;

    let mut token_embedding = Array2::<f32>::zeros((new_v, d));
    token_embedding
        .slice_mut(ndarray::s![..base_vocab_size, ..])
        .assign(&params.token_embedding);
    let mut rng = Rng::for_stream(seed, &[STREAM_EXTEND]);
    for r in base_vocab_size..new_v {
        for c in 0..d {
            token_embedding[(r, c)] = rng.truncated_normal(INIT_STD, INIT_CUTOFF_SIGMAS) as f32;
        }
    }

    let mut decoder_bias = Array2::<f32>::zeros((1, new_v));
    decoder_bias
        .slice_mut(ndarray::s![.., ..base_vocab_size])
        .assign(&params.decoder_bias);

    let mut out = params.clone();
    out.config.vocab_size = new_v;
    out.token_embedding = token_embedding;
    out.decoder_bias = decoder_bias;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tape-level forward graph, shared by inference, pretraining, and the tagger.
// ---------------------------------------------------------------------------

/// One input sequence. `attention_mask[i] == 0` marks padding that must not
/// influence any other position.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
}

impl BatchItem {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let len = ids.len();
        BatchItem {
            ids,
            segment_ids: vec![0; len],
            attention_mask: vec![1; len],
        }
    }
}

/// Parameter leaves bound to a tape, one leaf per tensor, slot = visit index.
pub struct BoundParams {
    vars: HashMap<String, Var>,
    pub n_slots: usize,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor name {name}"))
    }
}

/// Binds every parameter tensor onto the tape. Call once per tape; all
/// sequences of a batch share the same leaves so their gradients sum.
pub fn bind_params<F: Scalar>(tape: &mut Tape<F>, params: &ModelParameters<F>) -> BoundParams {
    let mut vars = HashMap::new();
    let mut slot = 0;
    params.visit(|name, tensor| {
        vars.insert(name.to_string(), tape.param(tensor.clone(), slot));
        slot += 1;
    });
    BoundParams {
        vars,
        n_slots: slot,
    }
}

/// Per-forward dropout source; `None` disables dropout (inference and all
/// verification modes).
pub struct Dropout {
    rng: Rng,
    p: f64,
}

impl Dropout {
    /// Keyed off (seed, tag) so each training instance gets its own stream.
    pub fn new(seed: u64, tag: u64, p: f64) -> Option<Self> {
        (p > 0.0).then(|| Dropout {
            rng: Rng::for_stream(seed, &[STREAM_DROPOUT, tag]),
            p,
        })
    }

    fn mask<F: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<F> {
        let keep = 1.0 - self.p;
        let scale = F::from_f64(1.0 / keep);
        let mut m = Array2::zeros((rows, cols));
        for v in m.iter_mut() {
            if self.rng.uniform() < keep {
                *v = scale;
            }
        }
        m
    }
}

fn apply_dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, dropout: &mut Option<Dropout>) -> Var {
    match dropout {
        Some(d) => {
            let (r, c) = tape.value(x).dim();
            let mask = d.mask(r, c);
            tape.mul_const(x, mask)
        }
        None => x,
    }
}

fn dense<F: Scalar>(tape: &mut Tape<F>, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let w = bound.var(&format!("{prefix}.weight"));
    let b = bound.var(&format!("{prefix}.bias"));
    let xw = tape.matmul(x, w);
    tape.add_row_vec(xw, b)
}

fn layer_norm<F: Scalar>(tape: &mut Tape<F>, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let gamma = bound.var(&format!("{prefix}.gamma"));
    let beta = bound.var(&format!("{prefix}.beta"));
    tape.layer_norm(x, gamma, beta, F::from_f64(LAYER_NORM_EPS))
}

/// Builds the encoder graph for one sequence: returns the per-position
/// hidden states (L×d) and the pooled [CLS] vector (1×d).
pub fn sequence_states<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    item: &BatchItem,
    mut dropout: Option<Dropout>,
) -> Result<(Var, Var), ModelError> {
    let len = item.ids.len();
    if len == 0 || len > cfg.max_position {
        return Err(ModelError::PositionOutOfRange {
            len,
            max_position: cfg.max_position,
        });
    }
    for &id in &item.ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    for &s in &item.segment_ids {
        if s as usize >= cfg.type_vocab {
            return Err(ModelError::SegmentOutOfRange {
                id: s,
                type_vocab: cfg.type_vocab,
            });
        }
    }

    // Embeddings: token + position + segment, then layer norm.
    let tok_table = bound.var("token_embedding");
    let pos_table = bound.var("position_embedding");
    let seg_table = bound.var("segment_embedding");
    let tok = tape.gather_rows(tok_table, item.ids.iter().map(|&i| i as usize).collect());
    let pos = tape.gather_rows(pos_table, (0..len).collect());
    let seg = tape.gather_rows(seg_table, item.segment_ids.iter().map(|&s| s as usize).collect());
    let sum = tape.add(tok, pos);
    let sum = tape.add(sum, seg);
    let mut x = layer_norm(tape, bound, "embeddings.norm", sum);
    x = apply_dropout(tape, x, &mut dropout);

    // Additive attention mask: column j gets a large negative bias when
    // position j is padding.
    let neg = F::from_f64(ATTENTION_MASK_BIAS);
    let mut mask = Array2::zeros((len, len));
    for j in 0..len {
        if item.attention_mask[j] == 0 {
            for i in 0..len {
                mask[(i, j)] = neg;
            }
        }
    }

    let head_dim = cfg.head_dim();
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    for layer in 0..cfg.layers {
        let p = |suffix: &str| format!("layer.{layer}.{suffix}");

        let q = dense(tape, bound, &p("attention.query"), x);
        let k = dense(tape, bound, &p("attention.key"), x);
        let v = dense(tape, bound, &p("attention.value"), x);

        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let offset = h * head_dim;
            let qh = tape.slice_cols(q, offset, head_dim);
            let kh = tape.slice_cols(k, offset, head_dim);
            let vh = tape.slice_cols(v, offset, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, mask.clone());
            let probs = tape.softmax_rows(scores);
            let probs = apply_dropout(tape, probs, &mut dropout);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let context = tape.concat_cols(head_outputs);
        let attn = dense(tape, bound, &p("attention.output"), context);
        let attn = apply_dropout(tape, attn, &mut dropout);
        let residual = tape.add(x, attn);
        x = layer_norm(tape, bound, &p("attention.norm"), residual);

        let inner = dense(tape, bound, &p("ff.inner"), x);
        let inner = tape.gelu(inner);
        let ff = dense(tape, bound, &p("ff.output"), inner);
        let ff = apply_dropout(tape, ff, &mut dropout);
        let residual = tape.add(x, ff);
        x = layer_norm(tape, bound, &p("ff.norm"), residual);
    }

    // Pooled [CLS]: tanh(dense(h0)).
    let cls = tape.gather_rows(x, vec![0]);
    let pooled = dense(tape, bound, "pooler", cls);
    let pooled = tape.tanh(pooled);
    Ok((x, pooled))
}

/// MLM logits at the selected positions: transform, GELU, layer norm, then
/// the tied decoder product `h · token_embeddingᵀ + decoder_bias`.
pub fn mlm_logits_var<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    hidden: Var,
    positions: &[usize],
) -> Var {
    let h = tape.gather_rows(hidden, positions.to_vec());
    let t = dense(tape, bound, "mlm.transform", h);
    let t = tape.gelu(t);
    let t = layer_norm(tape, bound, "mlm.norm", t);
    let embedding = bound.var("token_embedding");
    let decoder = tape.transpose(embedding);
    let logits = tape.matmul(t, decoder);
    let bias = bound.var("decoder_bias");
    tape.add_row_vec(logits, bias)
}

/// NSP logits: a linear classifier over the pooled vector.
pub fn nsp_logits_var<F: Scalar>(tape: &mut Tape<F>, bound: &BoundParams, pooled: Var) -> Var {
    dense(tape, bound, "nsp", pooled)
}

// ---------------------------------------------------------------------------
// Materialized (non-tape) entry points.
// ---------------------------------------------------------------------------

pub struct ForwardOutput<F: Scalar> {
    pub hidden: Array2<F>,
    pub pooled: Array2<F>,
}

/// Runs the encoder over a batch without tracking gradients.
pub fn forward<F: Scalar>(
    params: &ModelParameters<F>,
    batch: &[BatchItem],
) -> Result<Vec<ForwardOutput<F>>, ModelError> {
    let mut outputs = Vec::with_capacity(batch.len());
    for item in batch {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, params);
        let (hidden, pooled) = sequence_states(&mut tape, &bound, &params.config, item, None)?;
        outputs.push(ForwardOutput {
            hidden: tape.value(hidden).clone(),
            pooled: tape.value(pooled).clone(),
        });
    }
    Ok(outputs)
}

/// MLM logits for one sequence at the given positions, without gradients.
pub fn mlm_logits<F: Scalar>(
    params: &ModelParameters<F>,
    item: &BatchItem,
    positions: &[usize],
) -> Result<Array2<F>, ModelError> {
    for &p in positions {
        if p >= item.ids.len() {
            return Err(ModelError::PositionOutOfRange {
                len: p + 1,
                max_position: item.ids.len(),
            });
        }
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let (hidden, _) = sequence_states(&mut tape, &bound, &params.config, item, None)?;
    let logits = mlm_logits_var(&mut tape, &bound, hidden, positions);
    Ok(tape.value(logits).clone())
}

/// NSP logits for one sequence, without gradients.
pub fn nsp_logits<F: Scalar>(
    params: &ModelParameters<F>,
    item: &BatchItem,
) -> Result<Array2<F>, ModelError> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let (_, pooled) = sequence_states(&mut tape, &bound, &params.config, item, None)?;
    let logits = nsp_logits_var(&mut tape, &bound, pooled);
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_rows_of;

    fn tiny_cfg(vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_size: 16,
            layers: 2,
            heads: 2,
            ff_dim: 32,
            max_position: 16,
            type_vocab: 2,
            dropout: 0.0,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg(50, 7);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        let c = init_model(&ModelConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_zeroes_biases_and_ones_gammas() {
        let params = init_model(&tiny_cfg(50, 1)).unwrap();
        assert!(params.decoder_bias.iter().all(|&x| x == 0.0));
        assert_eq!(params.decoder_bias.dim(), (1, 50));
        assert!(params.embed_norm.beta.iter().all(|&x| x == 0.0));
        assert!(params.embed_norm.gamma.iter().all(|&x| x == 1.0));
        assert!(params.layers[0].attn_query.bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_moments_match_truncated_normal() {
        // V*d = 1000*16 = 16000 >= 1e4 draws.
        let cfg = ModelConfig {
            vocab_size: 1000,
            ..tiny_cfg(1000, 3)
        };
        let params = init_model(&cfg).unwrap();
        let e = &params.token_embedding;
        let n = e.len() as f64;
        let mean = e.iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (e.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.005, "mean {mean}");
        // Analytic std of a ±2σ-truncated normal is 0.8796σ = 0.017593.
        assert!((std - 0.02 * 0.8796).abs() < 0.001, "std {std}");
        assert!(e.iter().all(|&x| x.abs() <= (0.02 * 2.0) as f32 + f32::EPSILON));
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let mut cfg = tiny_cfg(50, 1);
        cfg.hidden_size = 15; // not divisible by heads=2
        let err = init_model(&cfg).unwrap_err();
        assert!(err.to_string().contains("divisible"));

        let mut cfg = tiny_cfg(50, 1);
        cfg.vocab_size = 3;
        assert!(init_model(&cfg).unwrap_err().to_string().contains("special"));
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let params = init_model(&tiny_cfg(50, 5)).unwrap();
        let item = BatchItem::from_ids(vec![2, 10, 11, 3]);
        let out = forward(&params, &[item]).unwrap();
        assert_eq!(out[0].hidden.dim(), (4, 16));
        assert_eq!(out[0].pooled.dim(), (1, 16));
        assert!(out[0].hidden.iter().all(|x| x.is_finite()));
        assert!(out[0].pooled.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn all_pad_batch_is_finite() {
        let params = init_model(&tiny_cfg(50, 5)).unwrap();
        let item = BatchItem {
            ids: vec![0, 0, 0],
            segment_ids: vec![0, 0, 0],
            attention_mask: vec![0, 0, 0],
        };
        let out = forward(&params, &[item]).unwrap();
        assert!(out[0].pooled.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let params = init_model(&tiny_cfg(50, 5)).unwrap();
        let a = BatchItem::from_ids(vec![2, 7, 3]);
        let b = BatchItem::from_ids(vec![2, 9, 12, 3]);
        let fwd = forward(&params, &[a.clone(), b.clone()]).unwrap();
        let rev = forward(&params, &[b, a]).unwrap();
        assert_eq!(fwd[0].hidden, rev[1].hidden);
        assert_eq!(fwd[1].hidden, rev[0].hidden);
    }

    #[test]
    fn masked_padding_does_not_influence_content() {
        let params = init_model(&tiny_cfg(50, 5)).unwrap();
        let bare = BatchItem::from_ids(vec![8]);
        let padded = BatchItem {
            ids: vec![8, 0, 0, 0],
            segment_ids: vec![0; 4],
            attention_mask: vec![1, 0, 0, 0],
        };
        let out = forward(&params, &[bare, padded]).unwrap();
        let h_bare = out[0].hidden.row(0);
        let h_padded = out[1].hidden.row(0);
        for (a, b) in h_bare.iter().zip(h_padded.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_range_inputs_error() {
        let params = init_model(&tiny_cfg(50, 5)).unwrap();
        let item = BatchItem::from_ids(vec![50]);
        assert!(matches!(
            forward(&params, &[item]),
            Err(ModelError::IdOutOfRange { id: 50, .. })
        ));
        let long = BatchItem::from_ids(vec![2; 17]);
        assert!(matches!(
            forward(&params, &[long]),
            Err(ModelError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn mlm_logits_shape_and_softmax_normalization() {
        let params = init_model(&tiny_cfg(50, 5)).unwrap();
        let item = BatchItem::from_ids(vec![2, 10, 11, 12, 3]);
        let logits = mlm_logits(&params, &item, &[1, 2, 3]).unwrap();
        assert_eq!(logits.dim(), (3, 50));
        let probs = softmax_rows_of(&logits);
        for row in probs.rows() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tied_decoder_product_matches_naive_matmul() {
        // With the transform taken out of the picture, logits are inner
        // products with embedding rows plus the bias.
        let params = init_model(&tiny_cfg(20, 9)).unwrap();
        let p64 = params.convert::<f64>();
        let transformed = Array2::from_shape_fn((3, 16), |(r, c)| {
            ((r * 31 + c * 7) as f64 * 0.01).sin()
        });
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.constant(transformed.clone());
        let e = tape.constant(p64.token_embedding.clone());
        let et = tape.transpose(e);
        let logits = tape.matmul(t, et);
        let embedding_t: Vec<f64> = p64.token_embedding.t().iter().copied().collect();
        let expected = graft_oracles::naive_matmul(
            transformed.as_slice().unwrap(),
            &embedding_t,
            3,
            16,
            20,
        );
        for (i, &e) in expected.iter().enumerate() {
            let got = tape.value(logits)[(i / 20, i % 20)];
            assert!((got - e).abs() < 1e-12);
        }
    }

    #[test]
    fn nsp_logits_shape_and_zero_weight_behavior() {
        let mut params = init_model(&tiny_cfg(50, 5)).unwrap();
        let item = BatchItem::from_ids(vec![2, 10, 3]);
        let logits = nsp_logits(&params, &item).unwrap();
        assert_eq!(logits.dim(), (1, 2));

        params.nsp.weight.fill(0.0);
        params.nsp.bias[(0, 0)] = 0.25;
        params.nsp.bias[(0, 1)] = -0.5;
        let logits = nsp_logits(&params, &item).unwrap();
        assert!((logits[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((logits[(0, 1)] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn extend_preserves_old_rows_bitwise() {
        let params = init_model(&tiny_cfg(5, 11)).unwrap();
        let extended = extend_model(&params, 5, 3, 99).unwrap();
        assert_eq!(extended.token_embedding.dim(), (8, 16));
        assert_eq!(extended.decoder_bias.dim(), (1, 8));
        for r in 0..5 {
            for c in 0..16 {
                assert_eq!(
                    extended.token_embedding[(r, c)].to_bits(),
                    params.token_embedding[(r, c)].to_bits()
                );
            }
        }
        for v in 5..8 {
            assert_eq!(extended.decoder_bias[(0, v)], 0.0);
        }
        // All non-vocab tensors bitwise unchanged.
        assert_eq!(extended.position_embedding, params.position_embedding);
        assert_eq!(extended.layers, params.layers);
        assert_eq!(extended.pooler, params.pooler);
        assert_eq!(extended.nsp, params.nsp);
    }

    #[test]
    fn extend_zero_appended_is_identity() {
        let params = init_model(&tiny_cfg(50, 11)).unwrap();
        let extended = extend_model(&params, 50, 0, 99).unwrap();
        assert_eq!(extended, params);
    }

    #[test]
    fn extend_rejects_wrong_base_size() {
        let params = init_model(&tiny_cfg(50, 11)).unwrap();
        assert!(matches!(
            extend_model(&params, 49, 3, 99),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn extension_preserves_old_vocab_logits() {
        let params = init_model(&tiny_cfg(30, 13)).unwrap();
        let extended = extend_model(&params, 30, 10, 77).unwrap();
        let item = BatchItem::from_ids(vec![2, 10, 20, 29, 3]);
        let before = mlm_logits(&params, &item, &[1, 2, 3]).unwrap();
        let after = mlm_logits(&extended, &item, &[1, 2, 3]).unwrap();
        assert_eq!(after.dim(), (3, 40));
        for r in 0..3 {
            for c in 0..30 {
                let diff = (before[(r, c)] - after[(r, c)]).abs();
                assert!(diff < 1e-6, "logit ({r},{c}) moved by {diff}");
            }
        }
    }

    #[test]
    fn weight_tying_perturbation_moves_logit_column() {
        let params = init_model(&tiny_cfg(30, 17)).unwrap();
        let item = BatchItem::from_ids(vec![2, 10, 3]);
        let base = mlm_logits(&params, &item, &[1]).unwrap();

        // Note: a uniform shift of a whole row is invisible to the
        // zero-mean layer-normed features, so poke a single component.
        let mut poked = params.clone();
        poked.token_embedding[(12, 3)] += 0.5;
        let after = mlm_logits(&poked, &item, &[1]).unwrap();
        // Column 12 must move; untouched far columns stay put.
        assert!((base[(0, 12)] - after[(0, 12)]).abs() > 1e-4);
        assert!((base[(0, 13)] - after[(0, 13)]).abs() < 1e-9);

        // And perturbing the row of an *input* token changes the hidden
        // state: the same matrix is on both sides of the model.
        let mut poked_in = params.clone();
        poked_in.token_embedding[(10, 3)] += 0.5;
        let h0 = forward(&params, &[item.clone()]).unwrap();
        let h1 = forward(&poked_in, &[item]).unwrap();
        let moved = h0.hidden_diff(&h1);
        assert!(moved > 1e-4);
    }

    trait HiddenDiff {
        fn hidden_diff(&self, other: &Self) -> f32;
    }

    impl HiddenDiff for Vec<ForwardOutput<f32>> {
        fn hidden_diff(&self, other: &Self) -> f32 {
            let mut max = 0.0f32;
            for (a, b) in self.iter().zip(other.iter()) {
                for (x, y) in a.hidden.iter().zip(b.hidden.iter()) {
                    max = max.max((x - y).abs());
                }
            }
            max
        }
    }

    #[test]
    fn bound_params_cover_every_tensor() {
        let params = init_model(&tiny_cfg(20, 1)).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let bound = bind_params(&mut tape, &params);
        assert_eq!(bound.n_slots, params.tensor_count());
        // Every canonical name resolves.
        params.visit(|name, _| {
            let _ = bound.var(name);
        });
    }
}
