//! Bottleneck adapter layers — the only trainable modification to the
//! language model.
//!
//! An adapter is a scaled residual bottleneck MLP,
//! `A(h) = h + λ·W_up·φ(W_down·h)` with φ = ReLU, bias-free. `W_up` starts
//! at zero, so a freshly initialized adapter is the identity and the adapted
//! model reproduces the base model bit for bit. Adapters attach to the
//! attention and feed-forward units of each transformer layer, either
//! sequentially (composed after the unit) or in parallel (reading the unit's
//! input); the bottleneck width is `d_h / downsample`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, TensorId};

/// How an adapter combines with the block it adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    /// `h ↦ B(h) + A(B(h))` — adapter reads the block's output.
    Sequential,
    /// `h ↦ B(h) + A(h)` — adapter reads the block's input.
    Parallel,
}

/// Whether the residual scale λ is a constant 1 or a trained scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    FixedOne,
    Trained,
}

/// Where adapters go and how wide their bottlenecks are. Mirrors the config
/// text notation, e.g. `type=s lambda=1 attn=8 ff=8` (downsample factor `-`
/// or an absent key means no adapter at that position).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub lambda_mode: LambdaMode,
    pub attn_downsample: Option<usize>,
    pub ff_downsample: Option<usize>,
}

impl AdapterConfig {
    /// Parse the four-field notation `<type> <lambda> <attn> <ff>`, e.g.
    /// `s 1 8 8`: (s)equential or (p)arallel; λ fixed at `1` or `t`rained;
    /// then the attention and feed-forward downsample factors, with `--`
    /// meaning that branch has no adapter.
    pub fn parse(text: &str) -> Result<AdapterConfig> {
        let fields: Vec<&str> = text.split_whitespace().collect();
        let [kind, lambda, attn, ff] = fields[..] else {
            return Err(Error::Config(format!(
                "adapter spec `{text}` (want `<type> <lambda> <attn> <ff>`, e.g. `s 1 8 8`)"
            )));
        };
        let kind = match kind {
            "s" => AdapterKind::Sequential,
            "p" => AdapterKind::Parallel,
            _ => return Err(Error::Config(format!("adapter type `{kind}` (want s or p)"))),
        };
        let lambda_mode = match lambda {
            "1" => LambdaMode::FixedOne,
            "t" => LambdaMode::Trained,
            _ => {
                return Err(Error::Config(format!(
                    "adapter lambda `{lambda}` (want 1 or t)"
                )))
            }
        };
        let config = AdapterConfig {
            kind,
            lambda_mode,
            attn_downsample: parse_downsample(attn)?,
            ff_downsample: parse_downsample(ff)?,
        };
        if config.attn_downsample.is_none() && config.ff_downsample.is_none() {
            return Err(Error::Config(
                "adapter spec has no adapters on either branch; use `adapters = --` instead".into(),
            ));
        }
        Ok(config)
    }

    /// Canonical text form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let kind = match self.kind {
            AdapterKind::Sequential => "s",
            AdapterKind::Parallel => "p",
        };
        let lambda = match self.lambda_mode {
            LambdaMode::FixedOne => "1",
            LambdaMode::Trained => "t",
        };
        let ds = |d: Option<usize>| d.map_or("--".to_string(), |v| v.to_string());
        format!(
            "{kind} {lambda} {} {}",
            ds(self.attn_downsample),
            ds(self.ff_downsample)
        )
    }
}

impl std::str::FromStr for AdapterConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<AdapterConfig> {
        AdapterConfig::parse(s)
    }
}

fn parse_downsample(value: &str) -> Result<Option<usize>> {
    if value == "--" {
        return Ok(None);
    }
    let v: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("downsample factor `{value}`")))?;
    if v == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    Ok(Some(v))
}

/// One adapter instance: bottleneck projections plus the residual scale.
/// `w_down` is `d_b × d_h`, `w_up` is `d_h × d_b`, λ is a 1-element tensor.
#[derive(Debug, Clone)]
pub struct AdapterParams<T: Scalar> {
    pub w_down: Tensor<T>,
    pub w_up: Tensor<T>,
    pub lambda: Tensor<T>,
}

impl<T: Scalar> AdapterParams<T> {
    /// Identity-at-start initialization: `w_up` all zeros, `w_down` small
    /// uniform, λ = 1 (trainable only in [`LambdaMode::Trained`]).
    pub fn init<R: Rng>(
        d_h: usize,
        downsample: usize,
        lambda_mode: LambdaMode,
        rng: &mut R,
    ) -> Result<AdapterParams<T>> {
        if downsample == 0 || d_h % downsample != 0 {
            return Err(Error::Config(format!(
                "downsample {downsample} must divide d_h {d_h}"
            )));
        }
        let d_b = d_h / downsample;
        let limit = 1.0 / (d_h as f64).sqrt();
        let mut lambda = Tensor::scalar(T::one());
        if lambda_mode == LambdaMode::Trained {
            lambda = lambda.with_requires_grad();
        }
        Ok(AdapterParams {
            w_down: Tensor::uniform(&[d_b, d_h], limit, rng).with_requires_grad(),
            w_up: Tensor::zeros(&[d_h, d_b]).with_requires_grad(),
            lambda,
        })
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundAdapter {
        BoundAdapter {
            w_down: g.leaf(self.w_down.clone()),
            w_up: g.leaf(self.w_up.clone()),
            lambda: g.leaf(self.lambda.clone()),
        }
    }
}

/// Graph handles for one adapter's tensors.
#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    pub w_down: TensorId,
    pub w_up: TensorId,
    pub lambda: TensorId,
}

/// The bottleneck correction `λ·W_up·φ(W_down·h)` on row vectors, without
/// the residual.
pub fn adapter_delta<T: Scalar>(
    g: &mut Graph<T>,
    h: TensorId,
    a: &BoundAdapter,
) -> Result<TensorId> {
    let down_t = g.transpose(a.w_down)?;
    let bottleneck = g.matmul(h, down_t)?;
    let activated = g.relu(bottleneck);
    let up_t = g.transpose(a.w_up)?;
    let up = g.matmul(activated, up_t)?;
    Ok(g.scale_by_param(up, a.lambda)?)
}

/// The full adapter map `A(h) = h + λ·W_up·φ(W_down·h)`.
pub fn adapter_forward<T: Scalar>(
    g: &mut Graph<T>,
    h: TensorId,
    a: &BoundAdapter,
) -> Result<TensorId> {
    let delta = adapter_delta(g, h, a)?;
    Ok(g.add(h, delta)?)
}

/// Wrap a block function with an adapter: sequential gives
/// `h ↦ B(h) + A(B(h))`, parallel gives `h ↦ B(h) + A(h)`.
///
/// Note the residual inside `A` makes the sequential form double the block
/// output at initialization; the transformer wiring in the `lm` module
/// instead applies the adapter as a correction inside each layer so that a
/// fresh adapter leaves the model bit-exactly unchanged.
pub fn adapt_block<T, F>(
    block: F,
    adapter: AdapterParams<T>,
    kind: AdapterKind,
) -> impl Fn(&mut Graph<T>, TensorId) -> Result<TensorId>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, TensorId) -> Result<TensorId>,
{
    move |g, h| {
        let b = block(g, h)?;
        let bound = adapter.bind(g);
        let a_of = match kind {
            AdapterKind::Sequential => adapter_forward(g, b, &bound)?,
            AdapterKind::Parallel => adapter_forward(g, h, &bound)?,
        };
        Ok(g.add(b, a_of)?)
    }
}

/// Adapters for one transformer layer: one per adaptable unit.
#[derive(Debug, Clone)]
pub struct LayerAdapters<T: Scalar> {
    pub attn: Option<AdapterParams<T>>,
    pub ff: Option<AdapterParams<T>>,
}

/// All adapters in the model, one [`LayerAdapters`] per transformer layer.
#[derive(Debug, Clone)]
pub struct AdapterSet<T: Scalar> {
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapters<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn init<R: Rng>(
        config: AdapterConfig,
        d_h: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<AdapterSet<T>> {
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let attn = config
                .attn_downsample
                .map(|ds| AdapterParams::init(d_h, ds, config.lambda_mode, rng))
                .transpose()?;
            let ff = config
                .ff_downsample
                .map(|ds| AdapterParams::init(d_h, ds, config.lambda_mode, rng))
                .transpose()?;
            layers.push(LayerAdapters { attn, ff });
        }
        Ok(AdapterSet { config, layers })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundAdapterSet {
        BoundAdapterSet {
            kind: self.config.kind,
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayerAdapters {
                    attn: l.attn.as_ref().map(|a| a.bind(g)),
                    ff: l.ff.as_ref().map(|a| a.bind(g)),
                })
                .collect(),
        }
    }

    /// Visit every tensor with its checkpoint name,
    /// `adapter.{layer}.{attn|ff}.{down|up|lambda}`.
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (pos, params) in [("attn", &layer.attn), ("ff", &layer.ff)] {
                if let Some(a) = params {
                    f(format!("adapter.{i}.{pos}.down"), &a.w_down);
                    f(format!("adapter.{i}.{pos}.up"), &a.w_up);
                    f(format!("adapter.{i}.{pos}.lambda"), &a.lambda);
                }
            }
        }
    }

    /// Mutable counterpart of [`AdapterSet::visit`], used by checkpoint load
    /// and the optimizer.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (pos, params) in [("attn", &mut layer.attn), ("ff", &mut layer.ff)] {
                if let Some(a) = params {
                    f(format!("adapter.{i}.{pos}.down"), &mut a.w_down);
                    f(format!("adapter.{i}.{pos}.up"), &mut a.w_up);
                    f(format!("adapter.{i}.{pos}.lambda"), &mut a.lambda);
                }
            }
        }
    }
}

/// Graph handles for the whole adapter set.
#[derive(Debug, Clone)]
pub struct BoundAdapterSet {
    pub kind: AdapterKind,
    pub layers: Vec<BoundLayerAdapters>,
}

/// Graph handles for one layer's adapters.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoundLayerAdapters {
    pub attn: Option<BoundAdapter>,
    pub ff: Option<BoundAdapter>,
}

/// Exact trainable-parameter count for a configuration: each adapter has
/// `2·d_h·d_b` weights (bias-free) plus one λ when trained, summed over
/// adapted positions and layers. `None` means no adapters at all.
pub fn count_trainable_params(config: Option<&AdapterConfig>, d_h: usize, n_layers: usize) -> usize {
    let Some(config) = config else { return 0 };
    let lambda_extra = match config.lambda_mode {
        LambdaMode::Trained => 1,
        LambdaMode::FixedOne => 0,
    };
    let per_instance = |ds: Option<usize>| {
        ds.map_or(0, |factor| 2 * d_h * (d_h / factor) + lambda_extra)
    };
    n_layers * (per_instance(config.attn_downsample) + per_instance(config.ff_downsample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Hand-specified Eq-style adapter: d_h=2, d_b=1, W_down=[1,1],
    /// W_up=[2,0]ᵀ, λ=1.
    fn hand_adapter() -> AdapterParams<f64> {
        AdapterParams {
            w_down: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap().with_requires_grad(),
            w_up: Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap().with_requires_grad(),
            lambda: Tensor::scalar(1.0),
        }
    }

    #[test]
    fn forward_matches_hand_oracle() {
        // h=[1,2]: bottleneck ReLU(1+2)=3, up = [2·3, 0], so h + [6,0] = [7,2].
        let mut g = Graph::new();
        let a = hand_adapter();
        let bound = a.bind(&mut g);
        let h = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let out = adapter_forward(&mut g, h, &bound).unwrap();
        assert_eq!(g.value(out), [7.0, 2.0]);
    }

    #[test]
    fn zero_up_projection_is_bit_exact_identity() {
        let mut g = Graph::new();
        let a: AdapterParams<f32> =
            AdapterParams::init(8, 4, LambdaMode::FixedOne, &mut rng(1)).unwrap();
        let bound = a.bind(&mut g);
        let h = g.leaf(Tensor::uniform(&[5, 8], 2.0, &mut rng(2)));
        let out = adapter_forward(&mut g, h, &bound).unwrap();
        assert_eq!(g.value(out), g.value(h), "fresh adapter must be exact identity");
    }

    #[test]
    fn zero_lambda_is_identity() {
        let mut g = Graph::new();
        let mut a: AdapterParams<f64> =
            AdapterParams::init(6, 2, LambdaMode::Trained, &mut rng(3)).unwrap();
        // Give w_up real weight so only λ=0 is doing the silencing.
        a.w_up = Tensor::uniform(&[6, 3], 1.0, &mut rng(4)).with_requires_grad();
        a.lambda = Tensor::scalar(0.0).with_requires_grad();
        let bound = a.bind(&mut g);
        let h = g.leaf(Tensor::uniform(&[2, 6], 1.0, &mut rng(5)));
        let out = adapter_forward(&mut g, h, &bound).unwrap();
        assert_eq!(g.value(out), g.value(h));
    }

    #[test]
    fn adapt_block_identity_adapter_doubles_or_skips() {
        // With W_up = 0, A is the identity: sequential gives 2·B(h),
        // parallel gives B(h) + h.
        let double = |g: &mut Graph<f64>, h: TensorId| Ok(g.scale(h, 2.0));
        let a: AdapterParams<f64> =
            AdapterParams::init(4, 2, LambdaMode::FixedOne, &mut rng(6)).unwrap();

        let seq = adapt_block(double, a.clone(), AdapterKind::Sequential);
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let out = seq(&mut g, h).unwrap();
        assert_eq!(g.value(out), [4.0, -8.0, 2.0, 12.0], "sequential: 2·B(h)");

        let par = adapt_block(double, a, AdapterKind::Parallel);
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let out = par(&mut g, h).unwrap();
        assert_eq!(g.value(out), [3.0, -6.0, 1.5, 9.0], "parallel: B(h) + h");
    }

    #[test]
    fn adapt_block_sequential_matches_hand_substitution() {
        // B(h) = 2h, adapter from the hand oracle, h = [1,2].
        // B(h) = [2,4]; A(B(h)) = [2,4] + [2·ReLU(6), 0] = [14,4];
        // result = B(h) + A(B(h)) = [16,8].
        let double = |g: &mut Graph<f64>, h: TensorId| Ok(g.scale(h, 2.0));
        let adapted = adapt_block(double, hand_adapter(), AdapterKind::Sequential);
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let out = adapted(&mut g, h).unwrap();
        assert_eq!(g.value(out), [16.0, 8.0]);
    }

    #[test]
    fn delta_lies_in_span_of_up_columns() {
        // With d_b = 1 every correction row must be a multiple of the single
        // w_up column: all 2×2 minors against it vanish (rank ≤ 1).
        let mut a: AdapterParams<f64> =
            AdapterParams::init(3, 3, LambdaMode::FixedOne, &mut rng(7)).unwrap();
        a.w_up = Tensor::uniform(&[3, 1], 1.0, &mut rng(8)).with_requires_grad();
        let mut g = Graph::new();
        let bound = a.bind(&mut g);
        let h = g.leaf(Tensor::uniform(&[4, 3], 1.0, &mut rng(9)));
        let delta = adapter_delta(&mut g, h, &bound).unwrap();
        let col = a.w_up.data();
        for row in g.value(delta).chunks(3) {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let minor = row[i] * col[j] - row[j] * col[i];
                    assert!(minor.abs() < 1e-9, "delta row escapes span of w_up");
                }
            }
        }
    }

    #[test]
    fn gradients_flow_into_adapter_but_not_frozen_block() {
        let mut g = Graph::new();
        let frozen_w = g.leaf(Tensor::<f64>::uniform(&[4, 4], 1.0, &mut rng(10)));
        let mut a: AdapterParams<f64> =
            AdapterParams::init(4, 2, LambdaMode::Trained, &mut rng(11)).unwrap();
        a.w_up = Tensor::uniform(&[4, 2], 0.5, &mut rng(12)).with_requires_grad();
        let bound = a.bind(&mut g);
        let h = g.leaf(Tensor::uniform(&[2, 4], 1.0, &mut rng(13)));
        let block_out = g.matmul(h, frozen_w).unwrap();
        let adapted = adapter_forward(&mut g, block_out, &bound).unwrap();
        let loss = g.sum_all(adapted);
        g.backward(loss).unwrap();
        assert!(g.grad(frozen_w).is_none(), "frozen block weight got a gradient");
        for id in [bound.w_down, bound.w_up, bound.lambda] {
            let grad = g.grad(id).expect("adapter tensor missing gradient");
            assert!(grad.iter().any(|&v| v != 0.0), "adapter gradient all-zero");
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut seed = rng(14);
        let d_h = 4;
        let base: AdapterParams<f64> =
            AdapterParams::init(d_h, 2, LambdaMode::Trained, &mut seed).unwrap();
        let params = vec![
            base.w_down.clone(),
            Tensor::uniform(&[d_h, 2], 0.7, &mut seed),
            Tensor::scalar(0.9),
        ];
        let input = Tensor::<f64>::uniform(&[3, d_h], 1.0, &mut seed);
        let err = grad_check(&params, move |g, ids| {
            let bound = BoundAdapter {
                w_down: ids[0],
                w_up: ids[1],
                lambda: ids[2],
            };
            let h = g.leaf(input.clone());
            let out = adapter_forward(g, h, &bound)?;
            let sq = g.mul(out, out)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "adapter FD error {err}");
    }

    #[test]
    fn config_text_round_trips() {
        for text in [
            "s 1 8 8",
            "p t -- 4",
            "s 1 12 --",
        ] {
            let config = AdapterConfig::parse(text).unwrap();
            assert_eq!(config.render(), text);
            assert_eq!(AdapterConfig::parse(&config.render()).unwrap(), config);
        }
    }

    #[test]
    fn config_rejects_empty_and_malformed() {
        assert!(AdapterConfig::parse("s 1 -- --").is_err());
        assert!(AdapterConfig::parse("q 1 -- 8").is_err());
        assert!(AdapterConfig::parse("s 2 -- 8").is_err());
        assert!(AdapterConfig::parse("s 1 -- 0").is_err());
        assert!(AdapterConfig::parse("bogus").is_err());
    }

    #[test]
    fn param_count_ratio_and_arithmetic_oracle() {
        let ff2 = AdapterConfig::parse("s 1 -- 2").unwrap();
        let ff4 = AdapterConfig::parse("s 1 -- 4").unwrap();
        let c2 = count_trainable_params(Some(&ff2), 128, 4);
        let c4 = count_trainable_params(Some(&ff4), 128, 4);
        assert_eq!(c2, 2 * c4, "halving the bottleneck halves the params");

        assert_eq!(count_trainable_params(None, 128, 4), 0);

        let both8 = AdapterConfig::parse("s 1 8 8").unwrap();
        assert_eq!(count_trainable_params(Some(&both8), 128, 4), 32768);
        let trained = AdapterConfig::parse("s t 8 8").unwrap();
        assert_eq!(count_trainable_params(Some(&trained), 128, 4), 32768 + 8);
    }

    #[test]
    fn init_rejects_non_dividing_downsample() {
        assert!(AdapterParams::<f32>::init(10, 3, LambdaMode::FixedOne, &mut rng(15)).is_err());
        assert!(AdapterSet::<f32>::init(
            AdapterConfig::parse("s 1 -- 3").unwrap(),
            16,
            2,
            &mut rng(16),
        )
        .is_err());
    }

    #[test]
    fn visit_names_follow_checkpoint_scheme() {
        let config = AdapterConfig::parse("s 1 8 4").unwrap();
        let set: AdapterSet<f32> = AdapterSet::init(config, 16, 2, &mut rng(17)).unwrap();
        let mut names = Vec::new();
        set.visit(&mut |name, _| names.push(name));
        assert!(names.contains(&"adapter.0.attn.down".to_string()));
        assert!(names.contains(&"adapter.1.ff.lambda".to_string()));
        assert_eq!(names.len(), 2 * 2 * 3);
    }
}
