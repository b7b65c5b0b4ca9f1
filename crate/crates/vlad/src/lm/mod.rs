//! Decoder-only autoregressive language model.
//!
//! The layout follows GPT-J: rotary positions instead of learned positional
//! embeddings, and parallel attention/feed-forward blocks that share one
//! pre-layer-norm — each layer computes `h + Attn(LN(h)) + FF(LN(h))` with a
//! single residual add. Projections and the head are bias-free; the
//! feed-forward expands `d_h → 4·d_h → d_h` with GELU.
//!
//! Inputs are [`PromptSequence`]s: ordered runs of token ids and/or
//! precomputed prefix embeddings (the image prefix). Prefix vectors occupy
//! ordinary positions — rotary treats them like any other token.

pub mod tokenizer;

use rand::Rng;

use crate::adapters::{
    adapter_delta, adapter_forward, AdapterKind, AdapterSet, BoundAdapter, BoundAdapterSet,
    BoundLayerAdapters,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, TensorId};
use tokenizer::TokenSequence;

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_window: usize,
    pub rotary_base: f64,
    pub ln_eps: f64,
    /// Prepend a BOS token to captions and prompts. Off by default; the
    /// training recipe works either way, so this stays a config choice.
    pub use_bos: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_h: 128,
            n_layers: 4,
            n_heads: 4,
            context_window: 512,
            rotary_base: 10000.0,
            ln_eps: 1e-5,
            use_bos: false,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_h == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h {} not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if (self.d_h / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary pairing",
                self.d_h / self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }
}

/// One transformer layer's weights.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ff_w1: Tensor<T>,
    pub ff_b1: Tensor<T>,
    pub ff_w2: Tensor<T>,
    pub ff_b2: Tensor<T>,
}

/// Full language model: embedding `E`, transformer stack `T`, head `H`.
#[derive(Debug, Clone)]
pub struct LmParams<T: Scalar> {
    pub config: LmConfig,
    pub embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Scalar> LmParams<T> {
    /// Fresh random initialization (weights N(0, 0.02), layer norms at
    /// identity). All tensors start trainable; the training module's
    /// partition step freezes them for multimodal runs.
    pub fn init<R: Rng>(config: LmConfig, rng: &mut R) -> Result<LmParams<T>> {
        config.validate()?;
        let (d, v) = (config.d_h, config.vocab_size);
        let std = 0.02;
        let mut block = || BlockParams {
            ln_gain: Tensor::ones(&[d]).with_requires_grad(),
            ln_bias: Tensor::zeros(&[d]).with_requires_grad(),
            wq: Tensor::normal(&[d, d], std, rng).with_requires_grad(),
            wk: Tensor::normal(&[d, d], std, rng).with_requires_grad(),
            wv: Tensor::normal(&[d, d], std, rng).with_requires_grad(),
            wo: Tensor::normal(&[d, d], std, rng).with_requires_grad(),
            ff_w1: Tensor::normal(&[d, 4 * d], std, rng).with_requires_grad(),
            ff_b1: Tensor::zeros(&[4 * d]).with_requires_grad(),
            ff_w2: Tensor::normal(&[4 * d, d], std, rng).with_requires_grad(),
            ff_b2: Tensor::zeros(&[d]).with_requires_grad(),
        };
        let blocks = (0..config.n_layers).map(|_| block()).collect();
        Ok(LmParams {
            config,
            embed: Tensor::normal(&[v, d], std, rng).with_requires_grad(),
            blocks,
            final_gain: Tensor::ones(&[d]).with_requires_grad(),
            final_bias: Tensor::zeros(&[d]).with_requires_grad(),
            head: Tensor::normal(&[d, v], std, rng).with_requires_grad(),
        })
    }

    /// Visit every tensor with its checkpoint name (`lm.embed`,
    /// `lm.block.{i}.…`, `lm.final_ln.…`, `lm.head`).
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        f("lm.embed".into(), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("lm.block.{i}.ln.gain"), &b.ln_gain);
            f(format!("lm.block.{i}.ln.bias"), &b.ln_bias);
            f(format!("lm.block.{i}.attn.wq"), &b.wq);
            f(format!("lm.block.{i}.attn.wk"), &b.wk);
            f(format!("lm.block.{i}.attn.wv"), &b.wv);
            f(format!("lm.block.{i}.attn.wo"), &b.wo);
            f(format!("lm.block.{i}.ff.w1"), &b.ff_w1);
            f(format!("lm.block.{i}.ff.b1"), &b.ff_b1);
            f(format!("lm.block.{i}.ff.w2"), &b.ff_w2);
            f(format!("lm.block.{i}.ff.b2"), &b.ff_b2);
        }
        f("lm.final_ln.gain".into(), &self.final_gain);
        f("lm.final_ln.bias".into(), &self.final_bias);
        f("lm.head".into(), &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f("lm.embed".into(), &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("lm.block.{i}.ln.gain"), &mut b.ln_gain);
            f(format!("lm.block.{i}.ln.bias"), &mut b.ln_bias);
            f(format!("lm.block.{i}.attn.wq"), &mut b.wq);
            f(format!("lm.block.{i}.attn.wk"), &mut b.wk);
            f(format!("lm.block.{i}.attn.wv"), &mut b.wv);
            f(format!("lm.block.{i}.attn.wo"), &mut b.wo);
            f(format!("lm.block.{i}.ff.w1"), &mut b.ff_w1);
            f(format!("lm.block.{i}.ff.b1"), &mut b.ff_b1);
            f(format!("lm.block.{i}.ff.w2"), &mut b.ff_w2);
            f(format!("lm.block.{i}.ff.b2"), &mut b.ff_b2);
        }
        f("lm.final_ln.gain".into(), &mut self.final_gain);
        f("lm.final_ln.bias".into(), &mut self.final_bias);
        f("lm.head".into(), &mut self.head);
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundLm {
        BoundLm {
            config: self.config,
            embed: g.leaf(self.embed.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln_gain: g.leaf(b.ln_gain.clone()),
                    ln_bias: g.leaf(b.ln_bias.clone()),
                    wq: g.leaf(b.wq.clone()),
                    wk: g.leaf(b.wk.clone()),
                    wv: g.leaf(b.wv.clone()),
                    wo: g.leaf(b.wo.clone()),
                    ff_w1: g.leaf(b.ff_w1.clone()),
                    ff_b1: g.leaf(b.ff_b1.clone()),
                    ff_w2: g.leaf(b.ff_w2.clone()),
                    ff_b2: g.leaf(b.ff_b2.clone()),
                })
                .collect(),
            final_gain: g.leaf(self.final_gain.clone()),
            final_bias: g.leaf(self.final_bias.clone()),
            head: g.leaf(self.head.clone()),
        }
    }
}

/// Graph handles for one layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ff_w1: TensorId,
    pub ff_b1: TensorId,
    pub ff_w2: TensorId,
    pub ff_b2: TensorId,
}

/// Graph handles for the whole model.
#[derive(Debug, Clone)]
pub struct BoundLm {
    pub config: LmConfig,
    pub embed: TensorId,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: TensorId,
    pub final_bias: TensorId,
    pub head: TensorId,
}

/// A model input: ordered runs of token ids and prefix embedding blocks.
#[derive(Debug, Clone)]
pub struct PromptSequence<T: Scalar> {
    segments: Vec<Segment<T>>,
}

#[derive(Debug, Clone)]
enum Segment<T: Scalar> {
    Tokens(Vec<usize>),
    Prefix(Tensor<T>),
}

impl<T: Scalar> Default for PromptSequence<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PromptSequence<T> {
    pub fn new() -> Self {
        PromptSequence { segments: Vec::new() }
    }

    pub fn from_tokens(ids: &[usize]) -> Self {
        let mut p = Self::new();
        p.push_tokens(ids);
        p
    }

    pub fn push_tokens(&mut self, ids: &[usize]) {
        if ids.is_empty() {
            return;
        }
        // Merge with a trailing token run so segment order stays canonical.
        if let Some(Segment::Tokens(run)) = self.segments.last_mut() {
            run.extend_from_slice(ids);
        } else {
            self.segments.push(Segment::Tokens(ids.to_vec()));
        }
    }

    /// Append `n` prefix vectors of dimension `d_h` (shape `[n, d_h]`).
    pub fn push_prefix(&mut self, embeddings: Tensor<T>) {
        assert_eq!(
            embeddings.shape().len(),
            2,
            "prefix embeddings must be [n, d_h]"
        );
        self.segments.push(Segment::Prefix(embeddings));
    }

    /// Total number of positions.
    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Tokens(ids) => ids.len(),
                Segment::Prefix(t) => t.shape()[0],
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Realize the input matrix `[len, d_h]` on a graph: tokens are gathered
    /// from the embedding table, prefix blocks enter as leaves.
    pub fn build(&self, g: &mut Graph<T>, embed: TensorId) -> Result<TensorId> {
        if self.is_empty() {
            return Err(Error::Usage("prompt sequence is empty".into()));
        }
        let mut parts = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Tokens(ids) => parts.push(g.embedding(embed, ids)?),
                Segment::Prefix(t) => parts.push(g.leaf(t.clone())),
            }
        }
        Ok(g.concat_rows(&parts)?)
    }
}

/// Attention unit: QKV projections with rotary positions, causal masked
/// softmax, output projection. Input is the layer's shared pre-norm.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &BoundBlock,
    ln: TensorId,
    config: &LmConfig,
    positions: &[usize],
) -> Result<TensorId> {
    let q = g.matmul(ln, b.wq)?;
    let k = g.matmul(ln, b.wk)?;
    let v = g.matmul(ln, b.wv)?;
    let qh = g.split_heads(q, config.n_heads)?;
    let kh = g.split_heads(k, config.n_heads)?;
    let vh = g.split_heads(v, config.n_heads)?;
    let qr = g.rotary(qh, positions, config.rotary_base)?;
    let kr = g.rotary(kh, positions, config.rotary_base)?;
    let scores = g.bmm(qr, kr, true)?;
    let scaled = g.scale(scores, 1.0 / (config.head_dim() as f64).sqrt());
    let masked = g.causal_mask(scaled)?;
    let probs = g.softmax(masked);
    let ctx = g.bmm(probs, vh, false)?;
    let merged = g.merge_heads(ctx)?;
    Ok(g.matmul(merged, b.wo)?)
}

/// Attach an adapter to a branch inside the layer. Sequential composes the
/// adapter after the branch; parallel adds the bottleneck correction of the
/// layer input. Either way the layer's own residual supplies the single `h`
/// term, so a zero-initialized adapter changes nothing.
fn apply_adapter<T: Scalar>(
    g: &mut Graph<T>,
    branch: TensorId,
    layer_input: TensorId,
    adapter: Option<&BoundAdapter>,
    kind: AdapterKind,
) -> Result<TensorId> {
    match adapter {
        None => Ok(branch),
        Some(a) => match kind {
            AdapterKind::Sequential => adapter_forward(g, branch, a),
            AdapterKind::Parallel => {
                let delta = adapter_delta(g, layer_input, a)?;
                Ok(g.add(branch, delta)?)
            }
        },
    }
}

/// One transformer layer: `h + Attn(LN(h)) + FF(LN(h))`, both branches fed
/// by the same layer norm, with optional adapters on each branch.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &BoundBlock,
    h: TensorId,
    config: &LmConfig,
    positions: &[usize],
    adapters: Option<&BoundLayerAdapters>,
    kind: AdapterKind,
) -> Result<TensorId> {
    let ln = g.layer_norm(h, b.ln_gain, b.ln_bias, config.ln_eps)?;

    let attn = attention(g, b, ln, config, positions)?;
    let attn = apply_adapter(g, attn, h, adapters.and_then(|a| a.attn.as_ref()), kind)?;

    let ff1 = g.matmul(ln, b.ff_w1)?;
    let ff1 = g.add_bias(ff1, b.ff_b1)?;
    let act = g.gelu(ff1);
    let ff2 = g.matmul(act, b.ff_w2)?;
    let ff = g.add_bias(ff2, b.ff_b2)?;
    let ff = apply_adapter(g, ff, h, adapters.and_then(|a| a.ff.as_ref()), kind)?;

    let h_attn = g.add(h, attn)?;
    Ok(g.add(h_attn, ff)?)
}

/// Run the stack and final layer norm over an embedded input `[m, d_h]`,
/// returning the normalized hidden states `[m, d_h]`.
pub fn lm_hidden<T: Scalar>(
    g: &mut Graph<T>,
    lm: &BoundLm,
    input: TensorId,
    adapters: Option<&BoundAdapterSet>,
) -> Result<TensorId> {
    let m = g.shape(input)[0];
    if m > lm.config.context_window {
        return Err(Error::ContextOverflow {
            len: m,
            window: lm.config.context_window,
        });
    }
    if let Some(set) = adapters {
        if set.layers.len() != lm.blocks.len() {
            return Err(Error::Config(format!(
                "adapter set covers {} layers but the model has {}",
                set.layers.len(),
                lm.blocks.len()
            )));
        }
    }
    let positions: Vec<usize> = (0..m).collect();
    let kind = adapters.map_or(AdapterKind::Sequential, |a| a.kind);
    let mut h = input;
    for (i, block) in lm.blocks.iter().enumerate() {
        let layer_adapters = adapters.map(|a| &a.layers[i]);
        h = block_forward(g, block, h, &lm.config, &positions, layer_adapters, kind)?;
    }
    Ok(g.layer_norm(h, lm.final_gain, lm.final_bias, lm.config.ln_eps)?)
}

/// Per-position logits `[m, V]` for an embedded input already on the graph.
pub fn logits_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    lm: &BoundLm,
    input: TensorId,
    adapters: Option<&BoundAdapterSet>,
) -> Result<TensorId> {
    let hidden = lm_hidden(g, lm, input, adapters)?;
    Ok(g.matmul(hidden, lm.head)?)
}

/// Evaluate per-position logits for a prompt. Builds a throwaway graph; use
/// [`logits_on_graph`] to compose with a loss instead.
pub fn lm_logits<T: Scalar>(
    prompt: &PromptSequence<T>,
    params: &LmParams<T>,
    adapters: Option<&AdapterSet<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let lm = params.bind(&mut g);
    let bound_adapters = adapters.map(|a| a.bind(&mut g));
    let input = prompt.build(&mut g, lm.embed)?;
    let logits = logits_on_graph(&mut g, &lm, input, bound_adapters.as_ref())?;
    Ok(g.tensor(logits).clone())
}

/// Argmax with the lowest token id winning ties.
pub fn argmax_token<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: append the argmax token until a stop token appears or
/// `max_new` tokens have been generated. The stop token, if produced, is the
/// last element of the returned sequence.
pub fn generate_greedy<T: Scalar>(
    prompt: &PromptSequence<T>,
    params: &LmParams<T>,
    adapters: Option<&AdapterSet<T>>,
    max_new: usize,
    stop_tokens: &[usize],
) -> Result<TokenSequence> {
    assert!(max_new >= 1, "generate_greedy needs max_new >= 1");
    let mut generated = Vec::new();
    for _ in 0..max_new {
        let mut extended = prompt.clone();
        extended.push_tokens(&generated);
        if extended.len() + 1 > params.config.context_window {
            return Err(Error::ContextOverflow {
                len: extended.len() + 1,
                window: params.config.context_window,
            });
        }
        let logits = lm_logits(&extended, params, adapters)?;
        let v = params.config.vocab_size;
        let last_row = &logits.data()[(extended.len() - 1) * v..];
        let next = argmax_token(last_row);
        generated.push(next);
        if stop_tokens.contains(&next) {
            break;
        }
    }
    Ok(TokenSequence(generated))
}
