//! Finite-difference verification of the autodiff engine.
//!
//! Builds a miniature multimodal model in f64, computes the caption loss on
//! one image-text pair, and compares analytic parameter gradients against
//! central differences, element by element. Run with:
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::lm::tokenizer::tokenize;
use vlad::lm::LmConfig;
use vlad::model::{ModelConfig, ModelParams, Visual};
use vlad::synth::render_scene_jittered;
use vlad::tensor::check::rel_err;
use vlad::train::{caption_grads, caption_loss, CaptionSample};
use vlad::vision::EncoderConfig;

fn main() -> vlad::Result<()> {
    let config = ModelConfig {
        lm: LmConfig {
            d_h: 8,
            n_layers: 2,
            n_heads: 2,
            context_window: 64,
            ..LmConfig::default()
        },
        encoder: EncoderConfig {
            resolution: 8,
            channels: vec![4, 6],
            ..EncoderConfig::default()
        },
        adapters: Some("s 1 2 2".parse()?),
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model: ModelParams<f64> = ModelParams::init(config, &mut rng)?;
    // Every parameter takes part in the check, frozen or not. Zero-valued
    // tensors (biases, adapter up-projections) get a small random offset so
    // no ReLU sits exactly on its kink, where finite differences and the
    // subgradient legitimately disagree.
    model.visit_mut(&mut |_, t| {
        t.requires_grad = true;
        for v in t.data_mut() {
            *v += 0.02 * (rand::Rng::gen::<f64>(&mut rng) - 0.5);
        }
    });

    let batch = [CaptionSample {
        visual: Visual::Image(render_scene_jittered(0, 0, 8, 5)),
        caption: tokenize("a red square\n"),
    }];

    let (report, grads) = caption_grads(&model, &batch)?;
    println!("caption loss: {:.4} nats/token", report.mean);
    println!("parameters with gradients: {}", grads.len());

    // Central differences on a few elements of every parameter tensor.
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0usize;
    for (name, grad) in &grads {
        let probes = if grad.len() >= 3 {
            vec![0, grad.len() / 2, grad.len() - 1]
        } else {
            vec![0]
        };
        for at in probes {
            let mut nudge = |delta: f64| -> vlad::Result<f64> {
                let mut m = model.clone();
                m.visit_mut(&mut |n, t| {
                    if n == *name {
                        t.data_mut()[at] += delta;
                    }
                });
                Ok(caption_loss(&m, &batch)?.mean)
            };
            let fd = (nudge(step)? - nudge(-step)?) / (2.0 * step);
            let err = rel_err(grad[at], fd);
            checked += 1;
            if err > worst {
                worst = err;
                worst_name = format!("{name}[{at}]");
            }
        }
    }
    println!("checked {checked} elements; worst relative error: {worst:.2e} at {worst_name}");
    assert!(worst < 1e-4, "finite differences disagree with autodiff");
    println!("all gradients verified");
    Ok(())
}
