//! Full model assembly: the frozen language model, the visual encoder, the
//! image prefix, optional adapters, and an optional entailment head.
//!
//! This module owns the parameter namespace. Every tensor in the model has a
//! dotted name (`lm.block.0.attn.wq`, `encoder.conv1.b`, `prefix.linear.w`,
//! `adapter.2.ff.down`, `classifier.w`, …) used for checkpointing, frozen
//! verification, and the training partition. [`ModelParams::visit`] walks the
//! tensors in a fixed order so serialized artifacts are byte-deterministic.

use rand::{Rng, SeedableRng};

use crate::adapters::{AdapterConfig, AdapterSet, BoundAdapterSet};
use crate::error::{Error, Result};
use crate::lm::{BoundLm, LmConfig, LmParams};
use crate::tensor::{Graph, Scalar, Tensor, TensorId};
use crate::vision::{
    encode_on_graph, prefix_on_graph, BoundEncoder, BoundPrefix, EncoderConfig, EncoderParams,
    FeatureGrid, Image, Phase, PrefixConfig, PrefixParams,
};

/// Entailment is a fixed three-way decision.
pub const ENTAILMENT_CLASSES: usize = 3;

/// Hyperparameters for every component, bundled.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub encoder: EncoderConfig,
    pub prefix: PrefixConfig,
    pub adapters: Option<AdapterConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lm: LmConfig::default(),
            encoder: EncoderConfig::default(),
            prefix: PrefixConfig::default(),
            adapters: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.encoder.validate()?;
        self.prefix.validate()?;
        if let Some(a) = &self.adapters {
            for ds in [a.attn_downsample, a.ff_downsample].into_iter().flatten() {
                if self.lm.d_h % ds != 0 {
                    return Err(Error::Config(format!(
                        "adapter downsample {ds} does not divide d_h {}",
                        self.lm.d_h
                    )));
                }
            }
        }
        Ok(())
    }

    /// Image-prefix length for this configuration.
    pub fn prefix_len(&self) -> usize {
        self.prefix.prefix_len(self.encoder.grid_side())
    }
}

/// Linear entailment head over the final hidden state at the readout
/// position. Zero-initialized so the untrained head is exactly uniform.
#[derive(Debug, Clone)]
pub struct ClassifierParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn init(d_h: usize) -> ClassifierParams<T> {
        ClassifierParams {
            w: Tensor::zeros(&[d_h, ENTAILMENT_CLASSES]).with_requires_grad(),
            b: Tensor::zeros(&[ENTAILMENT_CLASSES]).with_requires_grad(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundClassifier {
        BoundClassifier {
            w: g.leaf(self.w.clone()),
            b: g.leaf(self.b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundClassifier {
    pub w: TensorId,
    pub b: TensorId,
}

/// Every parameter in the system.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub lm: LmParams<T>,
    pub encoder: EncoderParams<T>,
    pub prefix: PrefixParams<T>,
    pub adapters: Option<AdapterSet<T>>,
    pub classifier: Option<ClassifierParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<ModelParams<T>> {
        config.validate()?;
        let lm = LmParams::init(config.lm, rng)?;
        let encoder = EncoderParams::init(config.encoder.clone(), rng)?;
        let prefix = PrefixParams::init(
            config.prefix,
            config.encoder.out_channels(),
            config.lm.d_h,
            rng,
        )?;
        let adapters = match &config.adapters {
            Some(a) => Some(AdapterSet::init(*a, config.lm.d_h, config.lm.n_layers, rng)?),
            None => None,
        };
        Ok(ModelParams {
            config,
            lm,
            encoder,
            prefix,
            adapters,
            classifier: None,
        })
    }

    /// Attach a fresh zero entailment head.
    pub fn add_classifier(&mut self) {
        self.classifier = Some(ClassifierParams::init(self.config.lm.d_h));
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.lm.visit(f);
        self.encoder.visit(f);
        self.prefix.visit(f);
        if let Some(a) = &self.adapters {
            a.visit(f);
        }
        if let Some(c) = &self.classifier {
            f("classifier.w".into(), &c.w);
            f("classifier.b".into(), &c.b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.lm.visit_mut(f);
        self.encoder.visit_mut(f);
        self.prefix.visit_mut(f);
        if let Some(a) = &mut self.adapters {
            a.visit_mut(f);
        }
        if let Some(c) = &mut self.classifier {
            f("classifier.w".into(), &mut c.w);
            f("classifier.b".into(), &mut c.b);
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        BoundModel {
            lm: self.lm.bind(g),
            encoder: self.encoder.bind(g),
            prefix: self.prefix.bind(g),
            adapters: self.adapters.as_ref().map(|a| a.bind(g)),
            classifier: self.classifier.as_ref().map(|c| c.bind(g)),
        }
    }

    pub fn n_params(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }
}

/// Graph handles for one bound copy of the model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub lm: BoundLm,
    pub encoder: BoundEncoder,
    pub prefix: BoundPrefix,
    pub adapters: Option<BoundAdapterSet>,
    pub classifier: Option<BoundClassifier>,
}

impl BoundModel {
    /// Walk every bound tensor id under the same names, in the same order,
    /// as [`ModelParams::visit`]. Training uses this to route gradients
    /// from the graph back to the named parameters.
    pub fn visit(&self, f: &mut impl FnMut(String, TensorId)) {
        f("lm.embed".into(), self.lm.embed);
        for (i, b) in self.lm.blocks.iter().enumerate() {
            f(format!("lm.block.{i}.ln.gain"), b.ln_gain);
            f(format!("lm.block.{i}.ln.bias"), b.ln_bias);
            f(format!("lm.block.{i}.attn.wq"), b.wq);
            f(format!("lm.block.{i}.attn.wk"), b.wk);
            f(format!("lm.block.{i}.attn.wv"), b.wv);
            f(format!("lm.block.{i}.attn.wo"), b.wo);
            f(format!("lm.block.{i}.ff.w1"), b.ff_w1);
            f(format!("lm.block.{i}.ff.b1"), b.ff_b1);
            f(format!("lm.block.{i}.ff.w2"), b.ff_w2);
            f(format!("lm.block.{i}.ff.b2"), b.ff_b2);
        }
        f("lm.final_ln.gain".into(), self.lm.final_gain);
        f("lm.final_ln.bias".into(), self.lm.final_bias);
        f("lm.head".into(), self.lm.head);
        for (i, s) in self.encoder.stages.iter().enumerate() {
            f(format!("encoder.conv{i}.w"), s.w);
            f(format!("encoder.conv{i}.b"), s.b);
        }
        f("prefix.linear.w".into(), self.prefix.linear_w);
        f("prefix.linear.b".into(), self.prefix.linear_b);
        f("prefix.ln.gain".into(), self.prefix.ln_gain);
        f("prefix.ln.bias".into(), self.prefix.ln_bias);
        if let Some(set) = &self.adapters {
            for (i, layer) in set.layers.iter().enumerate() {
                for (branch, a) in [("attn", &layer.attn), ("ff", &layer.ff)] {
                    if let Some(a) = a {
                        f(format!("adapter.{i}.{branch}.down"), a.w_down);
                        f(format!("adapter.{i}.{branch}.up"), a.w_up);
                        f(format!("adapter.{i}.{branch}.lambda"), a.lambda);
                    }
                }
            }
        }
        if let Some(c) = &self.classifier {
            f("classifier.w".into(), c.w);
            f("classifier.b".into(), c.b);
        }
    }
}

/// The visual side of one sample: a raw image to run through the encoder, or
/// a precomputed feature grid that bypasses it.
#[derive(Debug, Clone)]
pub enum Visual<T: Scalar> {
    Image(Image),
    Grid(FeatureGrid<T>),
}

impl<T: Scalar> Visual<T> {
    /// Flattened `[N², C]` feature rows on the graph. Images pass through
    /// the conv encoder (differentiably); grids are used as-is.
    pub fn rows_on_graph(
        &self,
        g: &mut Graph<T>,
        m: &BoundModel,
        config: &ModelConfig,
    ) -> Result<TensorId> {
        match self {
            Visual::Image(img) => {
                let input = g.leaf(img.to_tensor());
                encode_on_graph(g, input, &m.encoder, &config.encoder)
            }
            Visual::Grid(grid) => Ok(g.leaf(grid.data.clone())),
        }
    }
}

/// Image-prefix vectors `[n, d_h]` on the graph: encoder (unless bypassed),
/// then the prefix map with dropout live only in [`Phase::Train`].
pub fn image_prefix_on_graph<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    m: &BoundModel,
    config: &ModelConfig,
    visual: &Visual<T>,
    phase: Phase,
    rng: &mut R,
) -> Result<TensorId> {
    let rows = visual.rows_on_graph(g, m, config)?;
    prefix_on_graph(g, rows, &m.prefix, &config.prefix, config.lm.d_h, phase, rng)
}

/// Concatenate prefix vectors with embedded text tokens into one `[n+m, d_h]`
/// transformer input. `tokens` may be empty (prefix-only prompts).
pub fn multimodal_input<T: Scalar>(
    g: &mut Graph<T>,
    m: &BoundModel,
    prefix_id: TensorId,
    tokens: &[usize],
) -> Result<TensorId> {
    if tokens.is_empty() {
        return Ok(prefix_id);
    }
    let embedded = g.embedding(m.lm.embed, tokens)?;
    Ok(g.concat_rows(&[prefix_id, embedded])?)
}

/// Compute the eval-mode prefix as a plain tensor, for prompt assembly in
/// generation (no gradient flow needed).
pub fn prefix_tensor<T: Scalar>(
    params: &ModelParams<T>,
    visual: &Visual<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    // Dropout is inert in eval mode, so the rng is never consulted.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let id = image_prefix_on_graph(&mut g, &bound, &params.config, visual, Phase::Eval, &mut rng)?;
    Ok(g.tensor(id).clone())
}
