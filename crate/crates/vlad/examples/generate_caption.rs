//! Overfit a tiny captioner and watch it describe images.
//!
//! Four scenes, a few hundred steps, then greedy decoding from each image
//! prefix. With this little data the model memorizes its captions, so the
//! generations come back verbatim. Run with:
//!
//! ```text
//! cargo run --release --example generate_caption
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::lm::tokenizer::{detokenize, tokenize};
use vlad::lm::{generate_greedy, LmConfig, PromptSequence};
use vlad::model::{prefix_tensor, ModelConfig, ModelParams, Visual};
use vlad::synth::{caption_for, render_scene};
use vlad::train::{pretrain_lm, train_multimodal, CaptionSample, MetricsLog, TrainConfig};
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

    // Two colors x two shapes (square and cross differ strongly at 16x16).
    let scenes: Vec<(usize, usize)> = vec![(0, 0), (0, 2), (1, 0), (1, 2)];
    let samples: Vec<CaptionSample<f32>> = scenes
        .iter()
        .map(|&(color, shape)| CaptionSample {
            visual: Visual::Image(render_scene(color, shape, 16)),
            caption: tokenize(&format!("{}\n", caption_for(color, shape))),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model: ModelParams<f32> = ModelParams::init(config, &mut rng)?;
    let mut log = MetricsLog::new(std::io::sink())?;

    // Give the frozen-to-be backbone a head start on the caption text.
    let corpus: Vec<_> = scenes
        .iter()
        .map(|&(c, s)| tokenize(&format!("{}\n", caption_for(c, s))))
        .collect();
    let lm_config = TrainConfig {
        batch_size: 4,
        total_steps: 250,
        seed: 21,
        ..TrainConfig::default()
    };
    pretrain_lm(&mut model, &corpus, &lm_config, &mut log, |_, _| {})?;

    let mm_config = TrainConfig {
        batch_size: 4,
        total_steps: 600,
        seed: 22,
        ..TrainConfig::default()
    };
    let last = train_multimodal(&mut model, &samples, &mm_config, &mut log, |step, r| {
        if step % 100 == 0 {
            println!("step {step:3}  loss {:.3}", r.mean);
        }
    })?;
    println!("final loss {:.3} nats/token\n", last.mean);

    let mut verbatim = 0;
    for &(color, shape) in &scenes {
        let image = render_scene(color, shape, 16);
        let mut prompt = PromptSequence::new();
        prompt.push_prefix(prefix_tensor(&model, &Visual::Image(image))?);
        let out = generate_greedy(&prompt, &model.lm, model.adapters.as_ref(), 48, &[10])?;
        let text = detokenize(&out.0).trim_end().to_string();
        let want = caption_for(color, shape);
        let ok = text == want;
        verbatim += ok as usize;
        println!("{} {}  ->  {text}", if ok { "ok " } else { "MISS" }, want);
    }
    println!("\n{verbatim}/{} captions reproduced verbatim", scenes.len());
    Ok(())
}
