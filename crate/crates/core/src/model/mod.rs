//! BERT-style transformer encoder whose forward pass records, per layer,
//! the hidden states and per-head attention matrices.
//!
//! Post-norm residual ordering, learned absolute position embeddings,
//! GELU feed-forward. The forward pass returns a [`ForwardTrace`] holding
//! graph ids for every layer's hidden state and attention tensors, so the
//! distillation losses stay differentiable through the student side.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Tensor, TensorId, MASK_BIAS};
use crate::data::{CLS_ID, PAD_ID};
use crate::error::{Error, Result};

/// Layer-norm epsilon used for every normalization in the encoder.
pub const LN_EPS: f64 = 1e-12;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Which attention tensor a distillation loss reads from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnSource {
    /// Pre-softmax scaled scores (mask bias included). The default.
    #[default]
    Scores,
    /// Post-softmax probabilities.
    Probs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub attn_source: AttnSource,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
}

fn default_type_vocab() -> usize {
    2
}

fn default_num_classes() -> usize {
    3
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("type_vocab", self.type_vocab),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Canonical parameter names and shapes for this geometry, in model
    /// order. The classifier head is appended only when requested.
    pub fn parameter_shapes(&self, with_classifier: bool) -> IndexMap<String, Vec<usize>> {
        let d = self.hidden_size;
        let mut shapes = IndexMap::new();
        shapes.insert("embedding.token".to_string(), vec![self.vocab_size, d]);
        shapes.insert("embedding.position".to_string(), vec![self.max_seq_len, d]);
        shapes.insert("embedding.type".to_string(), vec![self.type_vocab, d]);
        shapes.insert("embedding.norm.gain".to_string(), vec![d]);
        shapes.insert("embedding.norm.bias".to_string(), vec![d]);
        for layer in 1..=self.num_layers {
            let p = |suffix: &str| format!("layer.{layer}.{suffix}");
            shapes.insert(p("attn.query.weight"), vec![d, d]);
            shapes.insert(p("attn.query.bias"), vec![d]);
            shapes.insert(p("attn.key.weight"), vec![d, d]);
            shapes.insert(p("attn.key.bias"), vec![d]);
            shapes.insert(p("attn.value.weight"), vec![d, d]);
            shapes.insert(p("attn.value.bias"), vec![d]);
            shapes.insert(p("attn.output.weight"), vec![d, d]);
            shapes.insert(p("attn.output.bias"), vec![d]);
            shapes.insert(p("attn.norm.gain"), vec![d]);
            shapes.insert(p("attn.norm.bias"), vec![d]);
            shapes.insert(p("ffn.inner.weight"), vec![d, self.ffn_size]);
            shapes.insert(p("ffn.inner.bias"), vec![self.ffn_size]);
            shapes.insert(p("ffn.output.weight"), vec![self.ffn_size, d]);
            shapes.insert(p("ffn.output.bias"), vec![d]);
            shapes.insert(p("ffn.norm.gain"), vec![d]);
            shapes.insert(p("ffn.norm.bias"), vec![d]);
        }
        if with_classifier {
            shapes.insert("classifier.pooler.weight".to_string(), vec![d, d]);
            shapes.insert("classifier.pooler.bias".to_string(), vec![d]);
            shapes.insert(
                "classifier.output.weight".to_string(),
                vec![d, self.num_classes],
            );
            shapes.insert("classifier.output.bias".to_string(), vec![self.num_classes]);
        }
        shapes
    }
}

/// Normal(0, std²) truncated at ±2 std, via Box-Muller rejection.
pub(crate) fn sample_truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let v = z * std;
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Named parameter collection of a BERT-style encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    has_classifier: bool,
}

impl EncoderModel {
    /// Fresh random model: weights truncated-normal, biases zero,
    /// layer-norm gain one. Deterministic per seed.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape) in config.parameter_shapes(false) {
            params.insert(name.clone(), init_param(&name, shape, &mut rng));
        }
        Ok(EncoderModel {
            config: config.clone(),
            params,
            has_classifier: false,
        })
    }

    /// Rebuild a model from checkpointed parts, validating names and shapes.
    pub fn from_parts(config: ModelConfig, params: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let has_classifier = params.contains_key("classifier.pooler.weight");
        let expected = config.parameter_shapes(has_classifier);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter {name}")));
                }
            }
        }
        // Re-order into canonical order regardless of input order.
        let mut params = params;
        let mut ordered = IndexMap::new();
        for name in expected.keys() {
            ordered.insert(name.clone(), params.shift_remove(name).unwrap());
        }
        Ok(EncoderModel {
            config,
            params: ordered,
            has_classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn has_classifier(&self) -> bool {
        self.has_classifier
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Attach a randomly initialized classifier head (pooler + output).
    /// Head weights use 1/sqrt(d) so the pooler's pre-tanh activations are
    /// O(1) at any hidden size; biases start at zero.
    pub fn attach_classifier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_std = 1.0 / (self.config.hidden_size as f64).sqrt();
        let full = self.config.parameter_shapes(true);
        for (name, shape) in full {
            if name.starts_with("classifier.") && !self.params.contains_key(&name) {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let numel: usize = shape.iter().product();
                    let values: Vec<f64> = (0..numel)
                        .map(|_| sample_truncated_normal(&mut rng, head_std))
                        .collect();
                    Tensor::new(shape, values).expect("head shapes are consistent")
                };
                self.params.insert(name.clone(), tensor);
            }
        }
        self.has_classifier = true;
    }

    pub fn drop_classifier(&mut self) {
        self.params
            .retain(|name, _| !name.starts_with("classifier."));
        self.has_classifier = false;
    }

    /// Keep the embeddings and the bottom `k` transformer layers; the
    /// classifier head is not carried over. This is the layer-pruning
    /// baseline and also the student initialization.
    pub fn truncate(&self, k: usize) -> Result<EncoderModel> {
        if k == 0 || k > self.config.num_layers {
            return Err(Error::Config(format!(
                "truncate: requested {k} layers from a {}-layer model",
                self.config.num_layers
            )));
        }
        let mut config = self.config.clone();
        config.num_layers = k;
        let mut params = IndexMap::new();
        for (name, shape) in config.parameter_shapes(false) {
            let src = self
                .params
                .get(&name)
                .unwrap_or_else(|| panic!("donor model missing {name}"));
            debug_assert_eq!(src.shape(), shape.as_slice());
            params.insert(name, src.clone());
        }
        Ok(EncoderModel {
            config,
            params,
            has_classifier: false,
        })
    }
}

fn init_param(name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with(".norm.gain") {
        Tensor::filled(shape, 1.0)
    } else if name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel)
            .map(|_| sample_truncated_normal(rng, INIT_STD))
            .collect();
        Tensor::new(shape, values).expect("init shapes are consistent")
    }
}

/// One batch of token sequences: ids, segment ids, and the attention mask.
/// Padding is a suffix; position ids are implied 0..n-1.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    batch: usize,
    seq_len: usize,
    token_ids: Vec<usize>,
    type_ids: Vec<usize>,
    mask: Vec<u8>,
}

impl SequenceBatch {
    pub fn new(
        batch: usize,
        seq_len: usize,
        token_ids: Vec<usize>,
        type_ids: Vec<usize>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        let numel = batch * seq_len;
        if token_ids.len() != numel || type_ids.len() != numel || mask.len() != numel {
            return Err(Error::Shape {
                context: "sequence batch buffers must be batch*seq_len".to_string(),
                lhs: vec![batch, seq_len],
                rhs: vec![token_ids.len(), type_ids.len(), mask.len()],
            });
        }
        for s in 0..batch {
            let row = &token_ids[s * seq_len..(s + 1) * seq_len];
            let mrow = &mask[s * seq_len..(s + 1) * seq_len];
            if row[0] != CLS_ID || mrow[0] != 1 {
                return Err(Error::Data(format!(
                    "sequence {s} must start with CLS and be unmasked"
                )));
            }
            let mut seen_pad = false;
            for t in 0..seq_len {
                match (mrow[t], seen_pad) {
                    (0, _) => {
                        seen_pad = true;
                        if row[t] != PAD_ID {
                            return Err(Error::Data(format!(
                                "sequence {s} has a non-PAD token at masked position {t}"
                            )));
                        }
                    }
                    (1, true) => {
                        return Err(Error::Data(format!(
                            "sequence {s} resumes after padding at position {t}; only suffix padding is allowed"
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(SequenceBatch {
            batch,
            seq_len,
            token_ids,
            type_ids,
            mask,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn type_ids(&self) -> &[usize] {
        &self.type_ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn token_row(&self, s: usize) -> &[usize] {
        &self.token_ids[s * self.seq_len..(s + 1) * self.seq_len]
    }

    pub fn mask_row(&self, s: usize) -> &[u8] {
        &self.mask[s * self.seq_len..(s + 1) * self.seq_len]
    }

    /// Same mask and type ids with substituted tokens (used by MLM masking).
    pub fn replace_tokens(&self, token_ids: Vec<usize>) -> Result<SequenceBatch> {
        SequenceBatch::new(
            self.batch,
            self.seq_len,
            token_ids,
            self.type_ids.clone(),
            self.mask.clone(),
        )
    }
}

/// Per-layer record of one forward pass: hidden states `[b,n,d]` and
/// per-head attention `[b,h,n,n]`, both as live graph ids. Scores carry the
/// additive mask bias (they are exactly the softmax inputs); padded query
/// rows are defined but excluded from losses via the stored mask.
pub struct ForwardTrace {
    pub embedding: TensorId,
    hidden: Vec<TensorId>,
    attn_scores: Vec<TensorId>,
    attn_probs: Vec<TensorId>,
    batch_size: usize,
    seq_len: usize,
    num_heads: usize,
    mask: Vec<u8>,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Hidden state of a layer, 1-indexed; layer 0 is the embedding output.
    pub fn hidden_at(&self, layer: usize) -> Result<TensorId> {
        if layer == 0 {
            return Ok(self.embedding);
        }
        self.hidden
            .get(layer - 1)
            .copied()
            .ok_or_else(|| Error::Internal(format!("trace has no layer {layer}")))
    }

    /// Attention tensor of a layer (1-indexed) for the requested source.
    pub fn attn_at(&self, layer: usize, source: AttnSource) -> Result<TensorId> {
        let store = match source {
            AttnSource::Scores => &self.attn_scores,
            AttnSource::Probs => &self.attn_probs,
        };
        store
            .get(layer - 1)
            .copied()
            .ok_or_else(|| Error::Internal(format!("trace has no layer {layer}")))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Validity mask of the traced batch, `b*n` entries.
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }
}

/// A model's parameters inserted into a graph as leaves, name -> id.
pub struct BoundModel {
    config: ModelConfig,
    ids: IndexMap<String, TensorId>,
}

/// Insert every parameter of `model` into `g` as a leaf. When `trainable`,
/// parameters outside `frozen` request gradients; frozen and non-trainable
/// parameters are constants in the graph and receive none.
pub fn bind(
    g: &mut Graph,
    model: &EncoderModel,
    trainable: bool,
    frozen: &BTreeSet<String>,
) -> BoundModel {
    let mut ids = IndexMap::new();
    for (name, tensor) in model.params() {
        let mut t = tensor.clone();
        t.clear_grad();
        t.set_requires_grad(trainable && !frozen.contains(name));
        ids.insert(name.clone(), g.leaf(t));
    }
    BoundModel {
        config: model.config().clone(),
        ids,
    }
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("bound model has no parameter {name}"))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn ids(&self) -> &IndexMap<String, TensorId> {
        &self.ids
    }

    /// Gradients populated by a backward pass, in parameter order.
    pub fn collect_grads(&self, g: &Graph) -> IndexMap<String, Vec<f64>> {
        let mut grads = IndexMap::new();
        for (name, &id) in &self.ids {
            if let Some(grad) = g.grad(id) {
                grads.insert(name.clone(), grad.to_vec());
            }
        }
        grads
    }
}

fn validate_batch(config: &ModelConfig, batch: &SequenceBatch) -> Result<()> {
    if batch.seq_len() > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq_len(),
            config.max_seq_len
        )));
    }
    for &id in batch.token_ids() {
        if id >= config.vocab_size {
            return Err(Error::Index {
                context: "token id outside vocabulary".to_string(),
                id,
                limit: config.vocab_size,
            });
        }
    }
    for &id in batch.type_ids() {
        if id >= config.type_vocab {
            return Err(Error::Index {
                context: "type id outside type vocabulary".to_string(),
                id,
                limit: config.type_vocab,
            });
        }
    }
    Ok(())
}

/// Token + position + type embedding sum, layer-normalized, then dropout.
pub fn embed(
    g: &mut Graph,
    bound: &BoundModel,
    batch: &SequenceBatch,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let config = bound.config().clone();
    validate_batch(&config, batch)?;
    let (b, n, d) = (batch.batch_size(), batch.seq_len(), config.hidden_size);

    let tok = g.embedding_lookup(bound.id("embedding.token"), batch.token_ids())?;
    let position_ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let pos = g.embedding_lookup(bound.id("embedding.position"), &position_ids)?;
    let typ = g.embedding_lookup(bound.id("embedding.type"), batch.type_ids())?;

    let sum1 = g.add(tok, pos)?;
    let sum = g.add(sum1, typ)?;
    let normed = g.layer_norm(
        sum,
        bound.id("embedding.norm.gain"),
        bound.id("embedding.norm.bias"),
        LN_EPS,
    )?;
    let dropped = g.dropout(normed, config.dropout_rate, rng, training)?;
    g.reshape(dropped, vec![b, n, d])
}

/// Additive mask bias, shape [b,h,n,n]: 0 on valid keys, [`MASK_BIAS`] on
/// padded keys.
fn mask_bias_constant(g: &mut Graph, batch: &SequenceBatch, heads: usize) -> Result<TensorId> {
    let (b, n) = (batch.batch_size(), batch.seq_len());
    let mut values = vec![0.0; b * heads * n * n];
    for s in 0..b {
        let mrow = batch.mask_row(s);
        for i in 0..heads {
            for q in 0..n {
                let base = ((s * heads + i) * n + q) * n;
                for (k, &mk) in mrow.iter().enumerate() {
                    if mk == 0 {
                        values[base + k] = MASK_BIAS;
                    }
                }
            }
        }
    }
    g.constant(vec![b, heads, n, n], values)
}

fn split_heads_index(b: usize, n: usize, h: usize, dk: usize) -> (Vec<usize>, Vec<usize>) {
    let d = h * dk;
    let mut index = Vec::with_capacity(b * n * d);
    for s in 0..b {
        for i in 0..h {
            for t in 0..n {
                for j in 0..dk {
                    index.push((s * n + t) * d + i * dk + j);
                }
            }
        }
    }
    (index, vec![b, h, n, dk])
}

fn merge_heads_index(b: usize, n: usize, h: usize, dk: usize) -> (Vec<usize>, Vec<usize>) {
    let d = h * dk;
    let mut index = Vec::with_capacity(b * n * d);
    for s in 0..b {
        for t in 0..n {
            for i in 0..h {
                for j in 0..dk {
                    index.push(((s * h + i) * n + t) * dk + j);
                }
            }
        }
    }
    (index, vec![b, n, d])
}

/// One encoder layer. Returns the layer output plus both attention tensors
/// (pre-softmax scaled scores with mask bias, and post-softmax
/// probabilities) so the attention source can be selected downstream.
pub fn encoder_layer(
    g: &mut Graph,
    bound: &BoundModel,
    layer: usize,
    h_in: TensorId,
    mask_bias: TensorId,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, TensorId, TensorId)> {
    let config = bound.config().clone();
    let shape = g.shape(h_in).to_vec();
    if shape.len() != 3 || shape[2] != config.hidden_size {
        return Err(Error::Shape {
            context: format!(
                "encoder_layer {layer}: input must be [b,n,{}]",
                config.hidden_size
            ),
            lhs: shape,
            rhs: vec![config.hidden_size],
        });
    }
    let (b, n) = (shape[0], shape[1]);
    let (h, dk) = (config.num_heads, config.head_size());
    let p = |suffix: &str| format!("layer.{layer}.{suffix}");

    let project = |g: &mut Graph, which: &str| -> Result<TensorId> {
        let w = bound.id(&p(&format!("attn.{which}.weight")));
        let bias = bound.id(&p(&format!("attn.{which}.bias")));
        let projected = g.matmul(h_in, w)?;
        g.add_bias(projected, bias)
    };
    let q = project(g, "query")?;
    let k = project(g, "key")?;
    let v = project(g, "value")?;

    let (split_idx, split_shape) = split_heads_index(b, n, h, dk);
    let qh = g.gather(q, split_idx.clone(), split_shape.clone())?;
    let kh = g.gather(k, split_idx.clone(), split_shape.clone())?;
    let vh = g.gather(v, split_idx, split_shape)?;

    let raw = g.matmul_nt(qh, kh)?;
    let scaled = g.scale(raw, 1.0 / (dk as f64).sqrt());
    let scores = g.add(scaled, mask_bias)?;
    let probs = g.softmax_rows(scores)?;

    let context = g.matmul(probs, vh)?;
    let (merge_idx, merge_shape) = merge_heads_index(b, n, h, dk);
    let merged = g.gather(context, merge_idx, merge_shape)?;

    let projected = g.matmul(merged, bound.id(&p("attn.output.weight")))?;
    let attn_out = g.add_bias(projected, bound.id(&p("attn.output.bias")))?;
    let attn_dropped = g.dropout(attn_out, config.dropout_rate, rng, training)?;
    let attn_res = g.add(h_in, attn_dropped)?;
    let attn_normed = g.layer_norm(
        attn_res,
        bound.id(&p("attn.norm.gain")),
        bound.id(&p("attn.norm.bias")),
        LN_EPS,
    )?;

    let inner = g.matmul(attn_normed, bound.id(&p("ffn.inner.weight")))?;
    let inner_biased = g.add_bias(inner, bound.id(&p("ffn.inner.bias")))?;
    let activated = g.gelu(inner_biased);
    let outer = g.matmul(activated, bound.id(&p("ffn.output.weight")))?;
    let ffn_out = g.add_bias(outer, bound.id(&p("ffn.output.bias")))?;
    let ffn_dropped = g.dropout(ffn_out, config.dropout_rate, rng, training)?;
    let ffn_res = g.add(attn_normed, ffn_dropped)?;
    let h_out = g.layer_norm(
        ffn_res,
        bound.id(&p("ffn.norm.gain")),
        bound.id(&p("ffn.norm.bias")),
        LN_EPS,
    )?;

    Ok((h_out, scores, probs))
}

/// Full forward pass: embedding plus all layers, recording the trace.
/// `training=false` disables dropout everywhere.
pub fn forward(
    g: &mut Graph,
    bound: &BoundModel,
    batch: &SequenceBatch,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrace> {
    let config = bound.config().clone();
    let embedding = embed(g, bound, batch, training, rng)?;
    let mask_bias = mask_bias_constant(g, batch, config.num_heads)?;

    let mut hidden = Vec::with_capacity(config.num_layers);
    let mut attn_scores = Vec::with_capacity(config.num_layers);
    let mut attn_probs = Vec::with_capacity(config.num_layers);
    let mut h_cur = embedding;
    for layer in 1..=config.num_layers {
        let (h_out, scores, probs) =
            encoder_layer(g, bound, layer, h_cur, mask_bias, training, rng)?;
        hidden.push(h_out);
        attn_scores.push(scores);
        attn_probs.push(probs);
        h_cur = h_out;
    }
    Ok(ForwardTrace {
        embedding,
        hidden,
        attn_scores,
        attn_probs,
        batch_size: batch.batch_size(),
        seq_len: batch.seq_len(),
        num_heads: config.num_heads,
        mask: batch.mask().to_vec(),
    })
}

/// Tanh pooler on the CLS position of the top hidden state, then an affine
/// map to class logits `[b,C]`.
pub fn classify(g: &mut Graph, bound: &BoundModel, trace: &ForwardTrace) -> Result<TensorId> {
    if !bound.has_param("classifier.pooler.weight") {
        return Err(Error::Config(
            "model has no classifier head; attach one before classifying".to_string(),
        ));
    }
    let config = bound.config().clone();
    let top = trace.hidden_at(trace.num_layers())?;
    let (b, n, d) = (trace.batch_size(), trace.seq_len(), config.hidden_size);

    let mut index = Vec::with_capacity(b * d);
    for s in 0..b {
        for c in 0..d {
            index.push((s * n) * d + c);
        }
    }
    let cls = g.gather(top, index, vec![b, d])?;
    let pooled_lin = g.matmul(cls, bound.id("classifier.pooler.weight"))?;
    let pooled_aff = g.add_bias(pooled_lin, bound.id("classifier.pooler.bias"))?;
    let pooled = g.tanh(pooled_aff);
    let logits_lin = g.matmul(pooled, bound.id("classifier.output.weight"))?;
    g.add_bias(logits_lin, bound.id("classifier.output.bias"))
}

/// Logits over the vocabulary from the top hidden state, weight-tied to the
/// token embedding table. Shape `[b*n, V]`, one row per position.
pub fn mlm_logits(g: &mut Graph, bound: &BoundModel, trace: &ForwardTrace) -> Result<TensorId> {
    let top = trace.hidden_at(trace.num_layers())?;
    let logits = g.matmul_nt(top, bound.id("embedding.token"))?;
    let (b, n) = (trace.batch_size(), trace.seq_len());
    g.reshape(logits, vec![b * n, bound.config().vocab_size])
}
