//! Training: parameter partition, captioning loss, optimizer plumbing, and
//! the three training drivers (multimodal captioning, entailment finetuning,
//! and text-only pretraining of the base language model).
//!
//! The central contract is the partition: during multimodal training the
//! language model's embedding, blocks, head, and final layer norm are frozen
//! — they receive no gradient buffers and no optimizer updates, so their
//! bytes never change — while the visual encoder, image prefix, and adapters
//! train with two separate cosine-annealed learning-rate groups.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::tokenizer::{TokenSequence, CLS};
use crate::lm::{logits_on_graph, lm_hidden};
use crate::model::{image_prefix_on_graph, multimodal_input, BoundModel, ModelParams, Visual};
use crate::tensor::{adam_step, cosine_lr, AdamConfig, AdamState, Graph, Scalar, TensorId};
use crate::vision::Phase;

/// Which parameter sets train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Freeze the LM; train encoder, prefix, and adapters.
    Multimodal,
    /// Multimodal set plus the entailment head.
    SnliFinetune,
    /// Train only the LM (stage-0 text pretraining).
    LmPretrain,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<TrainMode> {
        match s {
            "multimodal" => Ok(TrainMode::Multimodal),
            "snli_finetune" => Ok(TrainMode::SnliFinetune),
            "lm_pretrain" => Ok(TrainMode::LmPretrain),
            _ => Err(Error::Config(format!(
                "train mode `{s}` (want multimodal, snli_finetune, or lm_pretrain)"
            ))),
        }
    }
}

/// Optimization hyperparameters. Defaults follow the reference recipe:
/// dropout 0.1, learning rate 2e-6 for the encoder group and 8e-4 for the
/// prefix/adapter group, both cosine-annealed to 10%, weight decay 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout_p: f64,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            dropout_p: 0.1,
            lr_encoder: 2e-6,
            lr_head: 8e-4,
            total_steps: 1000,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// The two learning-rate groups: the visual encoder trains far slower than
/// the prefix and adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Encoder,
    Head,
}

/// Component a parameter name belongs to, by its namespace prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamComponent {
    Lm,
    Encoder,
    Prefix,
    Adapter,
    Classifier,
}

pub fn component_of(name: &str) -> Result<ParamComponent> {
    let head = name.split('.').next().unwrap_or("");
    match head {
        "lm" => Ok(ParamComponent::Lm),
        "encoder" => Ok(ParamComponent::Encoder),
        "prefix" => Ok(ParamComponent::Prefix),
        "adapter" => Ok(ParamComponent::Adapter),
        "classifier" => Ok(ParamComponent::Classifier),
        _ => Err(Error::UnknownParam(name.to_string())),
    }
}

/// Learning-rate group for a trainable parameter.
pub fn lr_group_for(name: &str) -> Result<LrGroup> {
    Ok(match component_of(name)? {
        ParamComponent::Encoder => LrGroup::Encoder,
        _ => LrGroup::Head,
    })
}

/// Cosine-annealed learning rate for a group at `step` of the run.
pub fn lr_for_group(group: LrGroup, step: usize, config: &TrainConfig) -> f64 {
    let base = match group {
        LrGroup::Encoder => config.lr_encoder,
        LrGroup::Head => config.lr_head,
    };
    cosine_lr(step, config.total_steps, base)
}

/// Named split of every model parameter into frozen and trainable sets.
#[derive(Debug, Clone, Default)]
pub struct ParameterPartition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

/// Set `requires_grad` on every parameter according to `mode` and return the
/// resulting partition. An adapter λ in fixed mode stays frozen even though
/// the rest of its adapter trains.
pub fn partition_parameters<T: Scalar>(
    model: &mut ModelParams<T>,
    mode: TrainMode,
) -> Result<ParameterPartition> {
    let lambda_trained = model
        .config
        .adapters
        .as_ref()
        .map(|a| a.lambda_mode == crate::adapters::LambdaMode::Trained)
        .unwrap_or(false);
    let mut partition = ParameterPartition::default();
    let mut failure = None;
    model.visit_mut(&mut |name, tensor| {
        let component = match component_of(&name) {
            Ok(c) => c,
            Err(e) => {
                failure.get_or_insert(e);
                return;
            }
        };
        let trainable = match (mode, component) {
            (TrainMode::LmPretrain, ParamComponent::Lm) => true,
            (TrainMode::LmPretrain, _) => false,
            (_, ParamComponent::Lm) => false,
            (_, ParamComponent::Classifier) => mode == TrainMode::SnliFinetune,
            (_, ParamComponent::Adapter) if name.ends_with(".lambda") => lambda_trained,
            _ => true,
        };
        tensor.requires_grad = trainable;
        tensor.grad = None;
        if trainable {
            partition.trainable.push(name);
        } else {
            partition.frozen.push(name);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(partition),
    }
}

/// One image-caption training pair.
#[derive(Debug, Clone)]
pub struct CaptionSample<T: Scalar> {
    pub visual: Visual<T>,
    pub caption: TokenSequence,
}

/// Loss value for one batch: mean nats per caption token, plus the summed
/// form (total nats) for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub mean: f64,
    pub sum: f64,
    pub tokens: usize,
}

/// Next-token targets for a prefixed caption: the logits at the last prefix
/// position score the first caption token, each caption position scores its
/// successor, and everything else (earlier prefix rows, the final position)
/// is masked out with -1.
pub fn caption_targets(prefix_len: usize, caption: &[usize]) -> Vec<i64> {
    assert!(prefix_len >= 1, "caption scoring needs at least one prefix vector");
    let mut targets = vec![-1_i64; prefix_len + caption.len()];
    for (i, &t) in caption.iter().enumerate() {
        targets[prefix_len - 1 + i] = t as i64;
    }
    targets
}

/// Per-sample captioning loss on the graph: mean nats/token over the
/// caption positions only.
fn caption_loss_on_graph<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    model_config: &crate::model::ModelConfig,
    sample: &CaptionSample<T>,
    phase: Phase,
    rng: &mut R,
) -> Result<(TensorId, usize)> {
    let caption = sample.caption.ids();
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let prefix = image_prefix_on_graph(g, bound, model_config, &sample.visual, phase, rng)?;
    let n = g.shape(prefix)[0];
    let input = multimodal_input(g, bound, prefix, caption)?;
    let logits = logits_on_graph(g, &bound.lm, input, bound.adapters.as_ref())?;
    let targets = caption_targets(n, caption);
    let loss = g.cross_entropy(logits, &targets)?;
    Ok((loss, caption.len()))
}

/// Batch loss: mean over samples of per-sample mean nats/token.
pub fn batch_caption_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    model_config: &crate::model::ModelConfig,
    batch: &[CaptionSample<T>],
    phase: Phase,
    rng: &mut R,
) -> Result<(TensorId, LossReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("caption batch".into()));
    }
    let mut report = LossReport::default();
    let mut acc: Option<TensorId> = None;
    let inv_b = 1.0 / batch.len() as f64;
    for sample in batch {
        let (loss, tokens) = caption_loss_on_graph(g, bound, model_config, sample, phase, rng)?;
        let mean_i = g.value(loss)[0].as_f64();
        report.mean += mean_i * inv_b;
        report.sum += mean_i * tokens as f64;
        report.tokens += tokens;
        let scaled = g.scale(loss, inv_b);
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    Ok((acc.expect("non-empty batch"), report))
}

/// Evaluate the captioning loss without touching any parameter (eval phase,
/// no dropout, no update).
pub fn caption_loss<T: Scalar>(
    model: &ModelParams<T>,
    batch: &[CaptionSample<T>],
) -> Result<LossReport> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, report) =
        batch_caption_loss(&mut g, &bound, &model.config, batch, Phase::Eval, &mut rng)?;
    Ok(report)
}

/// Analytic gradients of the batch caption loss, keyed by parameter name.
/// Only parameters marked `requires_grad` (and reached by this batch's
/// graph) appear in the map. Eval phase — no dropout — so the result is a
/// deterministic function of the model and batch, which is what a
/// finite-difference comparison needs.
pub fn caption_grads<T: Scalar>(
    model: &ModelParams<T>,
    batch: &[CaptionSample<T>],
) -> Result<(LossReport, HashMap<String, Vec<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, report) =
        batch_caption_loss(&mut g, &bound, &model.config, batch, Phase::Eval, &mut rng)?;
    g.backward(loss)?;
    let mut grads = HashMap::new();
    bound.visit(&mut |name, id| {
        if let Some(grad) = g.grad(id) {
            grads.insert(name, grad.to_vec());
        }
    });
    Ok((report, grads))
}

/// Per-parameter Adam states, created lazily and keyed by parameter name.
#[derive(Debug, Default)]
pub struct Optimizer {
    pub states: HashMap<String, AdamState>,
}

impl Optimizer {
    pub fn new() -> Optimizer {
        Optimizer::default()
    }
}

/// Forward/backward/update for one batch with any loss builder. Aborts on a
/// non-finite loss before touching parameters.
fn run_update<T: Scalar, F>(
    model: &mut ModelParams<T>,
    opt: &mut Optimizer,
    config: &TrainConfig,
    step: usize,
    build: F,
) -> Result<LossReport>
where
    F: FnOnce(&mut Graph<T>, &BoundModel) -> Result<(TensorId, LossReport)>,
{
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let (loss, report) = build(&mut g, &bound)?;
    if !report.mean.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became non-finite ({}) at step {step}; parameters were not updated — \
             lower the learning rates or check the input data",
            report.mean
        )));
    }
    g.backward(loss)?;

    let mut ids = HashMap::new();
    bound.visit(&mut |name, id| {
        ids.insert(name, id);
    });
    let mut failure = None;
    model.visit_mut(&mut |name, tensor| {
        if failure.is_some() || !tensor.requires_grad {
            return;
        }
        let id = ids[&name];
        // A trainable tensor disconnected from this loss (e.g. the encoder
        // when the batch is precomputed feature grids) simply isn't updated.
        let Some(grad) = g.grad(id) else {
            return;
        };
        let group = match lr_group_for(&name) {
            Ok(gr) => gr,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let lr = lr_for_group(group, step, config);
        if config.weight_decay != 0.0 {
            // Decoupled weight decay, applied alongside the Adam step.
            let shrink = T::from_f64(1.0 - lr * config.weight_decay);
            for v in tensor.data_mut() {
                *v = *v * shrink;
            }
        }
        let state = opt
            .states
            .entry(name)
            .or_insert_with(|| AdamState::new(tensor.numel(), AdamConfig::default()));
        if let Err(e) = adam_step(tensor.data_mut(), &grad, state, lr) {
            failure = Some(Error::Tensor(e));
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// One optimization step on a caption batch. The partition must already be
/// applied; frozen tensors are byte-identical before and after.
pub fn train_step<T: Scalar, R: Rng>(
    model: &mut ModelParams<T>,
    batch: &[CaptionSample<T>],
    opt: &mut Optimizer,
    config: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<LossReport> {
    let model_config = model.config.clone();
    run_update(model, opt, config, step, |g, bound| {
        batch_caption_loss(g, bound, &model_config, batch, Phase::Train, rng)
    })
}

/// Step-indexed plain-text metrics: `step loss lr_encoder lr_head`.
pub struct MetricsLog<W: Write> {
    w: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut w: W) -> Result<MetricsLog<W>> {
        writeln!(w, "step loss lr_encoder lr_head")?;
        Ok(MetricsLog { w })
    }

    pub fn record(&mut self, step: usize, loss: f64, lr_encoder: f64, lr_head: f64) -> Result<()> {
        writeln!(self.w, "{step} {loss:.6} {lr_encoder:e} {lr_head:e}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

/// Draw the next batch of indices, reshuffling each epoch.
struct BatchCycle {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchCycle {
    fn new(len: usize) -> BatchCycle {
        BatchCycle {
            order: (0..len).collect(),
            cursor: usize::MAX,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Multimodal captioning training: freeze the LM, train everything visual.
/// Calls `on_step` after every update (for progress echo) and writes one
/// metrics row per step.
pub fn train_multimodal<T: Scalar, W: Write>(
    model: &mut ModelParams<T>,
    data: &[CaptionSample<T>],
    config: &TrainConfig,
    log: &mut MetricsLog<W>,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("caption dataset".into()));
    }
    config.validate()?;
    partition_parameters(model, TrainMode::Multimodal)?;
    let mut opt = Optimizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cycle = BatchCycle::new(data.len());
    let mut last = LossReport::default();
    for step in 0..config.total_steps {
        let batch: Vec<CaptionSample<T>> = (0..config.batch_size)
            .map(|_| data[cycle.next(&mut rng)].clone())
            .collect();
        let report = train_step(model, &batch, &mut opt, config, step, &mut rng)?;
        log.record(
            step,
            report.mean,
            lr_for_group(LrGroup::Encoder, step, config),
            lr_for_group(LrGroup::Head, step, config),
        )?;
        on_step(step, &report);
        last = report;
    }
    Ok(last)
}

/// One image-hypothesis-label triple for entailment.
#[derive(Debug, Clone)]
pub struct EntailmentSample<T: Scalar> {
    pub visual: Visual<T>,
    pub hypothesis: String,
    pub label: usize,
}

/// Entailment logits `[1, 3]`: run prefix + hypothesis tokens through the
/// model and apply the linear head to the final hidden state at the readout
/// position. A dedicated readout token is appended to the hypothesis so the
/// classified position is consistent across samples.
fn entailment_logits_on_graph<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    model_config: &crate::model::ModelConfig,
    sample: &EntailmentSample<T>,
    phase: Phase,
    rng: &mut R,
) -> Result<TensorId> {
    if sample.hypothesis.trim().is_empty() {
        return Err(Error::EmptyHypothesis);
    }
    let Some(head) = &bound.classifier else {
        return Err(Error::Config("model has no classification head".into()));
    };
    let mut tokens = crate::lm::tokenizer::tokenize(&sample.hypothesis).0;
    tokens.push(CLS);
    let prefix = image_prefix_on_graph(g, bound, model_config, &sample.visual, phase, rng)?;
    let input = multimodal_input(g, bound, prefix, &tokens)?;
    let hidden = lm_hidden(g, &bound.lm, input, bound.adapters.as_ref())?;
    let m = g.shape(hidden)[0];
    let readout = g.slice_rows(hidden, m - 1, 1)?;
    let mm = g.matmul(readout, head.w)?;
    Ok(g.add_bias(mm, head.b)?)
}

fn batch_entailment_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    model_config: &crate::model::ModelConfig,
    batch: &[EntailmentSample<T>],
    phase: Phase,
    rng: &mut R,
) -> Result<(TensorId, LossReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("entailment batch".into()));
    }
    let mut report = LossReport::default();
    let mut acc: Option<TensorId> = None;
    let inv_b = 1.0 / batch.len() as f64;
    for sample in batch {
        if sample.label >= crate::model::ENTAILMENT_CLASSES {
            return Err(Error::Config(format!(
                "entailment label {} out of range",
                sample.label
            )));
        }
        let logits = entailment_logits_on_graph(g, bound, model_config, sample, phase, rng)?;
        let loss = g.cross_entropy(logits, &[sample.label as i64])?;
        let v = g.value(loss)[0].as_f64();
        report.mean += v * inv_b;
        report.sum += v;
        report.tokens += 1;
        let scaled = g.scale(loss, inv_b);
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    Ok((acc.expect("non-empty batch"), report))
}

/// Predicted class for one sample (eval phase).
pub fn classify_entailment<T: Scalar>(
    model: &ModelParams<T>,
    sample: &EntailmentSample<T>,
) -> Result<usize> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits =
        entailment_logits_on_graph(&mut g, &bound, &model.config, sample, Phase::Eval, &mut rng)?;
    Ok(crate::lm::argmax_token(g.value(logits)))
}

/// Fraction of samples classified correctly.
pub fn entailment_accuracy<T: Scalar>(
    model: &ModelParams<T>,
    samples: &[EntailmentSample<T>],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("entailment evaluation set".into()));
    }
    let mut correct = 0;
    for s in samples {
        if classify_entailment(model, s)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Finetune for entailment: attach a head if absent, train it together with
/// the standard trainable set (LM still frozen), and report held-out
/// accuracy.
pub fn finetune_classifier<T: Scalar, W: Write>(
    model: &mut ModelParams<T>,
    train: &[EntailmentSample<T>],
    heldout: &[EntailmentSample<T>],
    config: &TrainConfig,
    log: &mut MetricsLog<W>,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("entailment training set".into()));
    }
    config.validate()?;
    if model.classifier.is_none() {
        model.add_classifier();
    }
    partition_parameters(model, TrainMode::SnliFinetune)?;
    let mut opt = Optimizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cycle = BatchCycle::new(train.len());
    for step in 0..config.total_steps {
        let batch: Vec<EntailmentSample<T>> = (0..config.batch_size)
            .map(|_| train[cycle.next(&mut rng)].clone())
            .collect();
        let model_config = model.config.clone();
        let report = run_update(model, &mut opt, config, step, |g, bound| {
            batch_entailment_loss(g, bound, &model_config, &batch, Phase::Train, &mut rng)
        })?;
        log.record(
            step,
            report.mean,
            lr_for_group(LrGroup::Encoder, step, config),
            lr_for_group(LrGroup::Head, step, config),
        )?;
        on_step(step, &report);
    }
    entailment_accuracy(model, heldout)
}

/// Next-token loss for one text sequence (optionally BOS-prefixed by the
/// model config).
fn text_loss_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundModel,
    use_bos: bool,
    seq: &TokenSequence,
) -> Result<(TensorId, usize)> {
    let mut tokens = Vec::with_capacity(seq.len() + 1);
    if use_bos {
        tokens.push(crate::lm::tokenizer::BOS);
    }
    tokens.extend_from_slice(seq.ids());
    if tokens.len() < 2 {
        return Err(Error::EmptyCaption);
    }
    let input = g.embedding(bound.lm.embed, &tokens)?;
    let logits = logits_on_graph(g, &bound.lm, input, None)?;
    let mut targets: Vec<i64> = tokens[1..].iter().map(|&t| t as i64).collect();
    targets.push(-1);
    let scored = targets.len() - 1;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok((loss, scored))
}

/// Stage-0 pretraining of the base LM on a byte-level text corpus. Adapters
/// are not involved: this is the model the multimodal stage later freezes.
pub fn pretrain_lm<T: Scalar, W: Write>(
    model: &mut ModelParams<T>,
    corpus: &[TokenSequence],
    config: &TrainConfig,
    log: &mut MetricsLog<W>,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<LossReport> {
    let corpus: Vec<&TokenSequence> = corpus.iter().filter(|s| !s.is_empty()).collect();
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("text corpus".into()));
    }
    config.validate()?;
    partition_parameters(model, TrainMode::LmPretrain)?;
    let use_bos = model.config.lm.use_bos;
    let mut opt = Optimizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cycle = BatchCycle::new(corpus.len());
    let mut last = LossReport::default();
    for step in 0..config.total_steps {
        let batch: Vec<&TokenSequence> = (0..config.batch_size)
            .map(|_| corpus[cycle.next(&mut rng)])
            .collect();
        let report = run_update(model, &mut opt, config, step, |g, bound| {
            let mut report = LossReport::default();
            let mut acc: Option<TensorId> = None;
            let inv_b = 1.0 / batch.len() as f64;
            for seq in &batch {
                let (loss, tokens) = text_loss_on_graph(g, bound, use_bos, seq)?;
                let v = g.value(loss)[0].as_f64();
                report.mean += v * inv_b;
                report.sum += v * tokens as f64;
                report.tokens += tokens;
                let scaled = g.scale(loss, inv_b);
                acc = Some(match acc {
                    None => scaled,
                    Some(a) => g.add(a, scaled)?,
                });
            }
            Ok((acc.expect("non-empty batch"), report))
        })?;
        log.record(
            step,
            report.mean,
            lr_for_group(LrGroup::Encoder, step, config),
            lr_for_group(LrGroup::Head, step, config),
        )?;
        on_step(step, &report);
        last = report;
    }
    Ok(last)
}

/// Mean next-token loss of the LM over a text corpus, eval only.
pub fn text_corpus_loss<T: Scalar>(
    model: &ModelParams<T>,
    corpus: &[TokenSequence],
) -> Result<LossReport> {
    let mut report = LossReport::default();
    let mut counted = 0usize;
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let (loss, tokens) = text_loss_on_graph(&mut g, &bound, model.config.lm.use_bos, seq)?;
        let v = g.value(loss)[0].as_f64();
        report.mean += v;
        report.sum += v * tokens as f64;
        report.tokens += tokens;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::EmptyDataset("text corpus".into()));
    }
    report.mean /= counted as f64;
    Ok(report)
}
