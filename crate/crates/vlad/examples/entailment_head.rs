//! Finetune a 3-way entailment head on top of a trained captioner.
//!
//! The pipeline mirrors the full workflow: pretrain the text backbone,
//! train the visual side on captions (so the image prefix carries color in
//! a form the language model can read), then add a zero-initialized linear
//! classifier and finetune. The classifier reads the hidden state at a
//! readout position after the image prefix and hypothesis text; the
//! language model stays frozen throughout. Labels: 0 entailment, 1 neutral,
//! 2 contradiction. Run with:
//!
//! ```text
//! cargo run --release --example entailment_head
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::lm::tokenizer::tokenize;
use vlad::lm::LmConfig;
use vlad::model::{ModelConfig, ModelParams, Visual};
use vlad::synth::{caption_for, entailment_samples, render_scene};
use vlad::train::{
    entailment_accuracy, finetune_classifier, pretrain_lm, train_multimodal, CaptionSample,
    EntailmentSample, MetricsLog, TrainConfig,
};
use vlad::vision::EncoderConfig;

fn main() -> vlad::Result<()> {
    let config = ModelConfig {
        lm: LmConfig {
            d_h: 48,
            n_layers: 2,
            n_heads: 4,
            context_window: 128,
            ..LmConfig::default()
        },
        encoder: EncoderConfig {
            resolution: 16,
            channels: vec![8, 16],
            ..EncoderConfig::default()
        },
        adapters: Some("s 1 4 4".parse()?),
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut model: ModelParams<f32> = ModelParams::init(config, &mut rng)?;
    let mut log = MetricsLog::new(std::io::sink())?;

    // Stage 1: text pretraining on captions and hypothesis sentences.
    let mut corpus: Vec<_> = (0..3)
        .map(|c| tokenize(&format!("{}\n", caption_for(c, 0))))
        .collect();
    corpus.extend(
        ["red", "green", "blue"]
            .iter()
            .map(|c| tokenize(&format!("the image is {c}\n"))),
    );
    let warmup = TrainConfig {
        batch_size: 6,
        total_steps: 250,
        seed: 40,
        ..TrainConfig::default()
    };
    pretrain_lm(&mut model, &corpus, &warmup, &mut log, |_, _| {})?;

    // Stage 2: caption training teaches the prefix to express color.
    let captions: Vec<CaptionSample<f32>> = (0..3)
        .map(|c| CaptionSample {
            visual: Visual::Image(render_scene(c, 0, 16)),
            caption: tokenize(&format!("{}\n", caption_for(c, 0))),
        })
        .collect();
    let caption_steps = TrainConfig {
        batch_size: 3,
        total_steps: 400,
        seed: 42,
        ..TrainConfig::default()
    };
    train_multimodal(&mut model, &captions, &caption_steps, &mut log, |_, _| {})?;

    // Stage 3: entailment. Every jittered image appears with all three
    // hypotheses, so neither the image nor the text alone gives the answer.
    let mut samples: Vec<EntailmentSample<f32>> = entailment_samples(16, 6, 1)
        .into_iter()
        .map(|(image, hypothesis, label)| EntailmentSample {
            visual: Visual::Image(image),
            hypothesis,
            label: label as usize,
        })
        .collect();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(43));
    let cut = samples.len() * 2 / 3;
    let (train, heldout) = samples.split_at(cut);
    println!("{} train / {} held out", train.len(), heldout.len());

    model.add_classifier();
    let untrained = entailment_accuracy(&model, heldout)?;
    println!("accuracy before finetuning: {untrained:.2}");

    let steps = TrainConfig {
        batch_size: 6,
        total_steps: 500,
        seed: 41,
        ..TrainConfig::default()
    };
    let accuracy = finetune_classifier(&mut model, train, heldout, &steps, &mut log, |step, r| {
        if step % 100 == 0 {
            println!("step {step:3}  loss {:.3}", r.mean);
        }
    })?;
    println!("held-out accuracy after finetuning: {accuracy:.2}");
    assert!(accuracy > 0.5, "the toy task should be mostly separable");
    Ok(())
}
