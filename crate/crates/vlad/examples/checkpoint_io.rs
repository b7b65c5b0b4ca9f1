//! Checkpoints, configs, and integrity checking.
//!
//! Writes a model to the single-file archive format, shows that the bytes
//! are deterministic, reloads it, and demonstrates that a corrupted blob is
//! caught by its CRC32 and reported with the offending tensor's name. Run
//! with:
//!
//! ```text
//! cargo run --example checkpoint_io
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlad::io::{
    parse_config, read_checkpoint, read_checkpoint_manifest, render_config, write_checkpoint,
    RunConfig,
};
use vlad::lm::LmConfig;
use vlad::model::{ModelConfig, ModelParams};
use vlad::vision::EncoderConfig;

fn main() -> vlad::Result<()> {
    let config = RunConfig {
        model: ModelConfig {
            lm: LmConfig {
                d_h: 16,
                n_layers: 2,
                n_heads: 2,
                context_window: 64,
                ..LmConfig::default()
            },
            encoder: EncoderConfig {
                resolution: 16,
                channels: vec![8, 12],
                ..EncoderConfig::default()
            },
            adapters: Some("p t -- 4".parse()?),
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };

    // The config file format round-trips exactly.
    let text = render_config(&config);
    println!("--- canonical config ---\n{text}");
    assert_eq!(parse_config(&text)?, config);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model: ModelParams<f32> = ModelParams::init(config.model.clone(), &mut rng)?;

    let dir = std::env::temp_dir().join("vlad-checkpoint-io");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.vlck");
    write_checkpoint(&path, &model, &config)?;
    let first = std::fs::read(&path)?;
    write_checkpoint(&path, &model, &config)?;
    assert_eq!(first, std::fs::read(&path)?, "writes must be deterministic");
    println!("archive: {} bytes, byte-identical across writes", first.len());

    // The manifest is readable without decoding payloads.
    let manifest = read_checkpoint_manifest(&path)?;
    println!("--- first tensors ---");
    for entry in manifest.entries.iter().take(4) {
        println!(
            "{:<24} {:?} crc32={:08x}",
            entry.name, entry.shape, entry.crc32
        );
    }
    println!("({} tensors total)", manifest.entries.len());

    // Full reload restores every value.
    let (reloaded, _) = read_checkpoint::<f32>(&path, None)?;
    let mut intact = true;
    model.visit(&mut |name, t| {
        reloaded.visit(&mut |n2, t2| {
            if name == n2 && t.data() != t2.data() {
                intact = false;
            }
        });
    });
    assert!(intact);
    println!("reload: all tensors identical");

    // Flip one payload byte: the CRC catches it and names the tensor.
    let mut corrupt = first.clone();
    let n = corrupt.len();
    corrupt[n - 3] ^= 0x40;
    let bad = dir.join("corrupt.vlck");
    std::fs::write(&bad, &corrupt)?;
    match read_checkpoint::<f32>(&bad, None) {
        Err(e) => println!("corruption detected: {e}"),
        Ok(_) => panic!("corrupted archive loaded silently"),
    }
    Ok(())
}
