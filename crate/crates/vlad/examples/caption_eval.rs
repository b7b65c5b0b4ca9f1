//! Corpus BLEU@4 scoring, and why the caption prompt matters.
//!
//! First the metric by itself on hand-written candidates, then the effect
//! of prompting: a captioner trained on sentences that begin "A picture of"
//! scores higher when generation is primed with that prefix than when it
//! must produce the boilerplate itself. Run with:
//!
//! ```text
//! cargo run --release --example caption_eval
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::eval::{bleu4, evaluate_captions, CaptionExample, PromptPiece};
use vlad::lm::tokenizer::{detokenize, tokenize};
use vlad::lm::{generate_greedy, LmConfig, PromptSequence};
use vlad::model::{prefix_tensor, ModelConfig, ModelParams, Visual};
use vlad::synth::{caption_for, render_scene};
use vlad::train::{pretrain_lm, train_multimodal, CaptionSample, MetricsLog, TrainConfig};
use vlad::vision::EncoderConfig;

fn main() -> vlad::Result<()> {
    // The metric on its own.
    let refs = vec![vec!["the cat sat on the warm mat".to_string()]];
    for candidate in [
        "the cat sat on the warm mat",
        "the cat sat on a warm mat",
        "a dog stood by the cold door",
    ] {
        let score = bleu4(&[candidate.to_string()], &refs)?;
        println!("BLEU {score:.3}  {candidate}");
    }

    // Now with a model. Train a small captioner whose training text starts
    // with "A picture of"; score generations with and without that prefix.
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
    let scenes: Vec<(usize, usize)> = vec![(0, 0), (1, 0), (2, 0), (3, 1)];
    let samples: Vec<CaptionSample<f32>> = scenes
        .iter()
        .map(|&(c, s)| CaptionSample {
            visual: Visual::Image(render_scene(c, s, 16)),
            caption: tokenize(&format!("A picture of {}\n", caption_for(c, s))),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut model: ModelParams<f32> = ModelParams::init(config, &mut rng)?;
    let mut log = MetricsLog::new(std::io::sink())?;
    let corpus: Vec<_> = scenes
        .iter()
        .map(|&(c, s)| tokenize(&format!("A picture of {}\n", caption_for(c, s))))
        .collect();
    let steps = TrainConfig {
        batch_size: 4,
        total_steps: 250,
        seed: 31,
        ..TrainConfig::default()
    };
    pretrain_lm(&mut model, &corpus, &steps, &mut log, |_, _| {})?;
    let steps = TrainConfig {
        batch_size: 4,
        total_steps: 400,
        seed: 32,
        ..TrainConfig::default()
    };
    train_multimodal(&mut model, &samples, &steps, &mut log, |_, _| {})?;

    let items: Vec<CaptionExample> = scenes
        .iter()
        .enumerate()
        .map(|(i, &(c, s))| CaptionExample {
            id: format!("cap-{i}"),
            image: format!("{c},{s}"),
            references: vec![caption_for(c, s)],
        })
        .collect();

    // The responder decodes greedily from the image prefix plus whatever
    // text the prompt plan carries.
    let mut respond = |plan: &vlad::eval::PromptPlan| -> vlad::Result<String> {
        let mut prompt = PromptSequence::new();
        for piece in &plan.pieces {
            match piece {
                PromptPiece::Image(key) => {
                    let (c, s) = key.split_once(',').expect("image key is `color,shape`");
                    let image = render_scene(c.parse().unwrap(), s.parse().unwrap(), 16);
                    prompt.push_prefix(prefix_tensor(&model, &Visual::Image(image))?);
                }
                PromptPiece::Text(text) => prompt.push_tokens(&tokenize(text).0),
            }
        }
        let out = generate_greedy(&prompt, &model.lm, model.adapters.as_ref(), 64, &[10])?;
        Ok(detokenize(&out.0).trim_end().to_string())
    };

    let (with_prefix, _) = evaluate_captions(&items, "A picture of", &mut respond)?;
    let (bare, _) = evaluate_captions(&items, "", &mut respond)?;
    println!();
    println!("BLEU with prompt \"A picture of\": {:.3}", with_prefix.bleu4);
    println!("BLEU with empty prompt:          {:.3}", bare.bleu4);
    assert!(
        with_prefix.bleu4 > bare.bleu4,
        "the trained-in prefix should help"
    );
    Ok(())
}
