//! Scratch benchmark (not part of the repo surface).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use vlad::lm::tokenizer::{detokenize, tokenize};
use vlad::lm::{generate_greedy, LmConfig, PromptSequence};
use vlad::model::{prefix_tensor, ModelConfig, ModelParams, Visual};
use vlad::synth::caption_pairs;
use vlad::tensor::Tensor;
use vlad::train::{
    caption_loss, partition_parameters, pretrain_lm, train_step, CaptionSample, MetricsLog,
    Optimizer, TrainConfig, TrainMode,
};
use vlad::vision::{EncoderConfig, PrefixConfig};

fn main() {
    let t0 = Instant::now();
    let config = ModelConfig {
        lm: LmConfig {
            d_h: 128,
            n_layers: 4,
            n_heads: 4,
            context_window: 128,
            ..LmConfig::default()
        },
        encoder: EncoderConfig {
            resolution: 16,
            channels: vec![8, 16],
            ..EncoderConfig::default()
        },
        prefix: PrefixConfig {
            dropout_p: 0.0,
            ..PrefixConfig::default()
        },
        adapters: Some("s 1 8 8".parse().unwrap()),
    };
    let pairs = caption_pairs(16);
    let samples: Vec<CaptionSample<f32>> = pairs
        .iter()
        .map(|(img, cap)| CaptionSample {
            visual: Visual::Image(img.clone()),
            caption: tokenize(&format!("{cap}\n")),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut model: ModelParams<f32> = ModelParams::init(config, &mut rng).unwrap();

    let corpus: Vec<_> = pairs.iter().map(|(_, c)| tokenize(&format!("{c}\n"))).collect();
    let warmup = TrainConfig {
        batch_size: 8,
        total_steps: 400,
        dropout_p: 0.0,
        seed: 60,
        ..TrainConfig::default()
    };
    let mut log = MetricsLog::new(std::io::sink()).unwrap();
    pretrain_lm(&mut model, &corpus, &warmup, &mut log, |_, _| {}).unwrap();
    let warm = caption_loss_text(&model, &corpus);
    println!("pretrain done: {:.3} nats at {:.0}s", warm, t0.elapsed().as_secs_f64());

    let train_cfg = TrainConfig {
        batch_size: 8,
        total_steps: 3000,
        dropout_p: 0.0,
        lr_encoder: 3e-4,
        seed: 61,
        ..TrainConfig::default()
    };
    partition_parameters(&mut model, TrainMode::Multimodal).unwrap();
    let mut opt = Optimizer::new();
    let mut step_rng = ChaCha8Rng::seed_from_u64(61);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    for step in 0..train_cfg.total_steps {
        let batch: Vec<CaptionSample<f32>> = (0..train_cfg.batch_size)
            .map(|_| {
                if cursor >= order.len() {
                    order.shuffle(&mut step_rng);
                    cursor = 0;
                }
                cursor += 1;
                samples[order[cursor - 1]].clone()
            })
            .collect();
        train_step(&mut model, &batch, &mut opt, &train_cfg, step, &mut step_rng).unwrap();
        if (step + 1) % 200 == 0 {
            let eval = caption_loss(&model, &samples).unwrap().mean;
            let v = verbatim_count(&model, &pairs);
            println!(
                "step {:4}  eval {:.4}  verbatim {v}/32  ({:.0}s)",
                step + 1,
                eval,
                t0.elapsed().as_secs_f64()
            );
            if v >= 31 {
                break;
            }
        }
    }
    let eval = caption_loss(&model, &samples).unwrap().mean;
    let v = verbatim_count(&model, &pairs);
    println!(
        "final eval {eval:.4}, verbatim {v}/32, total {:.0}s",
        t0.elapsed().as_secs_f64()
    );
}

fn verbatim_count(model: &ModelParams<f32>, pairs: &[(vlad::vision::Image, String)]) -> usize {
    let mut verbatim = 0;
    for (img, cap) in pairs {
        let mut prompt = PromptSequence::new();
        let prefix: Tensor<f32> = prefix_tensor(model, &Visual::Image(img.clone())).unwrap();
        prompt.push_prefix(prefix);
        let out = generate_greedy(&prompt, &model.lm, model.adapters.as_ref(), 48, &[10]).unwrap();
        verbatim += usize::from(detokenize(&out.0).trim_end() == cap);
    }
    verbatim
}

fn caption_loss_text(model: &ModelParams<f32>, corpus: &[vlad::lm::tokenizer::TokenSequence]) -> f64 {
    use vlad::lm::lm_logits;
    let mut total = 0.0;
    for seq in corpus {
        let ids = &seq.0;
        let prompt = PromptSequence::from_tokens(&ids[..ids.len() - 1]);
        let logits = lm_logits(&prompt, &model.lm, model.adapters.as_ref()).unwrap();
        let v = logits.shape()[1];
        let data = logits.data();
        for (row, &target) in ids[1..].iter().enumerate() {
            let row_logits = &data[row * v..(row + 1) * v];
            let max = row_logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = row_logits.iter().map(|&x| (x - max).exp()).sum::<f32>().ln() + max;
            total += f64::from(lse - row_logits[target]);
        }
    }
    total / corpus.iter().map(|s| s.0.len() - 1).sum::<usize>() as f64
}
