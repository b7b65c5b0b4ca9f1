//! Train the visual side of the model while the language model stays
//! frozen, then prove the freeze held.
//!
//! The encoder, image-prefix projection, and adapters learn to caption a
//! handful of synthetic scenes. Checkpoints from before and after training
//! are compared by CRC32: every `lm.*` tensor must be byte-identical. Run
//! with:
//!
//! ```text
//! cargo run --release --example train_captioner
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::io::{verify_frozen, write_checkpoint, RunConfig};
use vlad::lm::tokenizer::tokenize;
use vlad::lm::LmConfig;
use vlad::model::{ModelConfig, ModelParams, Visual};
use vlad::synth::caption_pairs;
use vlad::train::{pretrain_lm, train_multimodal, CaptionSample, MetricsLog, TrainConfig};
use vlad::vision::EncoderConfig;

fn main() -> vlad::Result<()> {
    let config = RunConfig {
        model: ModelConfig {
            lm: LmConfig {
                d_h: 32,
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
        },
        train: TrainConfig {
            batch_size: 4,
            total_steps: 200,
            seed: 5,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };

    // Eight scenes are enough to see the loss move.
    let samples: Vec<CaptionSample<f32>> = caption_pairs(16)
        .into_iter()
        .take(8)
        .map(|(image, caption)| CaptionSample {
            visual: Visual::Image(image),
            caption: tokenize(&format!("A picture of {caption}\n")),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut model: ModelParams<f32> = ModelParams::init(config.model.clone(), &mut rng)?;

    // Give the backbone some text competence before freezing it.
    let corpus: Vec<_> = samples.iter().map(|s| s.caption.clone()).collect();
    let mut log = MetricsLog::new(std::io::sink())?;
    let warmup = TrainConfig {
        total_steps: 150,
        ..config.train.clone()
    };
    pretrain_lm(&mut model, &corpus, &warmup, &mut log, |_, _| {})?;

    let dir = std::env::temp_dir().join("vlad-train-captioner");
    std::fs::create_dir_all(&dir)?;
    let base = dir.join("base.vlck");
    let after = dir.join("after.vlck");
    write_checkpoint(&base, &model, &config)?;

    let mut first = None;
    let last = train_multimodal(&mut model, &samples, &config.train, &mut log, |step, r| {
        if first.is_none() {
            first = Some(r.mean);
        }
        if step % 50 == 0 {
            println!("step {step:3}  loss {:.3}", r.mean);
        }
    })?;
    println!(
        "loss {:.3} -> {:.3} over {} steps",
        first.unwrap(),
        last.mean,
        config.train.total_steps
    );

    write_checkpoint(&after, &model, &config)?;
    let report = verify_frozen(&base, &after)?;
    assert!(report.pass(), "frozen weights drifted: {:?}", report.changed);
    println!(
        "frozen check: {} language model tensors byte-identical",
        report.checked
    );
    println!("checkpoints in {}", dir.display());
    Ok(())
}
