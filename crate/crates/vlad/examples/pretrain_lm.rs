//! Pretrain the byte-level language model on a tiny text corpus.
//!
//! The corpus is the set of synthetic caption sentences. A small decoder
//! memorizes them quickly, and the falling loss curve prints as it goes.
//! This is the "frozen backbone" every other example builds on. Run with:
//!
//! ```text
//! cargo run --release --example pretrain_lm
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::lm::tokenizer::tokenize;
use vlad::lm::LmConfig;
use vlad::model::{ModelConfig, ModelParams};
use vlad::synth::caption_texts;
use vlad::train::{pretrain_lm, text_corpus_loss, MetricsLog, TrainConfig};

fn main() -> vlad::Result<()> {
    let config = ModelConfig {
        lm: LmConfig {
            d_h: 32,
            n_layers: 2,
            n_heads: 4,
            context_window: 128,
            ..LmConfig::default()
        },
        adapters: None,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 8,
        total_steps: 300,
        seed: 3,
        ..TrainConfig::default()
    };

    let corpus: Vec<_> = caption_texts("A picture of")
        .iter()
        .map(|line| tokenize(&format!("{line}\n")))
        .collect();
    println!("corpus: {} lines", corpus.len());

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model: ModelParams<f32> = ModelParams::init(config, &mut rng)?;
    let before = text_corpus_loss(&model, &corpus)?.mean;

    let mut log = MetricsLog::new(std::io::sink())?;
    pretrain_lm(&mut model, &corpus, &train, &mut log, |step, report| {
        if step % 50 == 0 {
            println!("step {step:4}  loss {:.3}", report.mean);
        }
    })?;

    let after = text_corpus_loss(&model, &corpus)?.mean;
    println!("corpus loss: {before:.3} -> {after:.3} nats/token");
    assert!(after < before / 2.0, "pretraining should cut the loss in half");
    Ok(())
}
