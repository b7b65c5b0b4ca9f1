//! Deterministic synthetic datasets: flat-color shapes on a black
//! background, with caption, question-answering, and entailment manifests
//! built from them.
//!
//! Everything here is a pure function of its arguments — the same color,
//! shape, resolution, and seed always produce byte-identical images — so
//! tests and examples can regenerate datasets instead of shipping fixtures.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{self, CaptionRecord, EntailmentRecord, QaRecord};
use crate::vision::ppm::save_ppm;
use crate::vision::Image;

/// Color names with their RGB values. Chosen to be far apart in RGB space
/// so a small encoder can separate them.
pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
    ("white", [255, 255, 255]),
    ("gray", [128, 128, 128]),
];

/// Shape names. Each has a distinct silhouette at any resolution ≥ 8.
pub const SHAPES: [&str; 4] = ["square", "circle", "cross", "triangle"];

/// The caption every dataset uses for a given scene. Seven words, so
/// 4-gram statistics are well-defined for corpus-level scoring.
pub fn caption_for(color: usize, shape: usize) -> String {
    format!(
        "a {} {} on a black background",
        COLORS[color].0, SHAPES[shape]
    )
}

fn inside(shape: usize, x: i64, y: i64, c: i64, r: i64) -> bool {
    let (dx, dy) = (x - c, y - c);
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => dx * dx + dy * dy <= r * r,
        2 => (dx.abs() * 3 <= r && dy.abs() <= r) || (dy.abs() * 3 <= r && dx.abs() <= r),
        // Upward-pointing triangle: width grows linearly from apex to base.
        3 => dy.abs() <= r && dx.abs() * 2 <= y - (c - r),
        _ => unreachable!("shape index out of range"),
    }
}

/// Render one scene: a filled shape of the given color, centered on a black
/// canvas of side `resolution`.
pub fn render_scene(color: usize, shape: usize, resolution: usize) -> Image {
    let rgb = COLORS[color].1;
    let c = resolution as i64 / 2;
    let r = resolution as i64 / 3;
    let mut pixels = vec![0u8; resolution * resolution * 3];
    for y in 0..resolution as i64 {
        for x in 0..resolution as i64 {
            if inside(shape, x, y, c, r) {
                let at = 3 * (y as usize * resolution + x as usize);
                pixels[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }
    Image::new(resolution, resolution, pixels).expect("pixel buffer sized to shape")
}

/// Like [`render_scene`] but with per-pixel uniform noise in ±24, clamped
/// to valid bytes. Different seeds give distinct images of the same scene,
/// which is how the entailment split gets unseen held-out images.
pub fn render_scene_jittered(color: usize, shape: usize, resolution: usize, seed: u64) -> Image {
    let base = render_scene(color, shape, resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = base
        .pixels
        .iter()
        .map(|&p| (p as i32 + rng.gen_range(-24..=24)).clamp(0, 255) as u8)
        .collect();
    Image::new(resolution, resolution, pixels).expect("jitter preserves the buffer size")
}

/// All 32 color × shape caption pairs, in a fixed order.
pub fn caption_pairs(resolution: usize) -> Vec<(Image, String)> {
    let mut pairs = Vec::new();
    for color in 0..COLORS.len() {
        for shape in 0..SHAPES.len() {
            pairs.push((render_scene(color, shape, resolution), caption_for(color, shape)));
        }
    }
    pairs
}

/// The captions as plain text lines prefixed with `prompt`, for language
/// model pretraining (one sentence per line).
pub fn caption_texts(prompt: &str) -> Vec<String> {
    let mut texts = Vec::new();
    for color in 0..COLORS.len() {
        for shape in 0..SHAPES.len() {
            let caption = caption_for(color, shape);
            if prompt.is_empty() {
                texts.push(caption);
            } else {
                texts.push(format!("{prompt} {caption}"));
            }
        }
    }
    texts
}

/// One QA item per scene: the question names the shape, the ten reference
/// answers all agree on the color.
pub fn qa_items(resolution: usize) -> Vec<(Image, String, Vec<String>)> {
    let mut items = Vec::new();
    for color in 0..COLORS.len() {
        for shape in 0..SHAPES.len() {
            items.push((
                render_scene(color, shape, resolution),
                format!("what color is the {}?", SHAPES[shape]),
                vec![COLORS[color].0.to_string(); 10],
            ));
        }
    }
    items
}

/// Entailment triples over the first three colors (all squares). The
/// hypothesis names a color; the label is entailment when it matches the
/// image, neutral for the cyclically next color, contradiction otherwise.
///
/// Each of the `3 × per_copy` jittered images appears with all three
/// hypotheses — and therefore with all three labels — so the image alone
/// never determines the answer. A model that shortcuts past the hypothesis
/// (or past the image) cannot beat chance.
pub fn entailment_samples(
    resolution: usize,
    per_copy: usize,
    seed: u64,
) -> Vec<(Image, String, u8)> {
    let mut samples = Vec::new();
    for image_color in 0..3 {
        for copy in 0..per_copy {
            let jitter = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((image_color * 1000 + copy) as u64);
            let image = render_scene_jittered(image_color, 0, resolution, jitter);
            for hyp_color in 0..3 {
                let label = if hyp_color == image_color {
                    0
                } else if hyp_color == (image_color + 1) % 3 {
                    1
                } else {
                    2
                };
                samples.push((
                    image.clone(),
                    format!("the image is {}", COLORS[hyp_color].0),
                    label,
                ));
            }
        }
    }
    samples
}

/// Write the caption dataset (PPM images plus a JSON-lines manifest) under
/// `dir` and return the manifest path.
pub fn write_caption_dataset(dir: &Path, resolution: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for color in 0..COLORS.len() {
        for shape in 0..SHAPES.len() {
            let name = format!("{}_{}.ppm", COLORS[color].0, SHAPES[shape]);
            save_ppm(&dir.join(&name), &render_scene(color, shape, resolution))?;
            records.push(CaptionRecord {
                image: name,
                caption: caption_for(color, shape),
            });
        }
    }
    let manifest = dir.join("captions.jsonl");
    io::write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Write the QA dataset under `dir` and return the manifest path.
pub fn write_qa_dataset(dir: &Path, resolution: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for color in 0..COLORS.len() {
        for shape in 0..SHAPES.len() {
            let name = format!("{}_{}.ppm", COLORS[color].0, SHAPES[shape]);
            save_ppm(&dir.join(&name), &render_scene(color, shape, resolution))?;
            records.push(QaRecord {
                image: name,
                question: format!("what color is the {}?", SHAPES[shape]),
                answers: vec![COLORS[color].0.to_string(); 10],
            });
        }
    }
    let manifest = dir.join("qa.jsonl");
    io::write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Write the entailment dataset under `dir` and return the manifest path.
/// Samples keep the order of [`entailment_samples`]; callers split
/// train/held-out downstream.
pub fn write_entailment_dataset(
    dir: &Path,
    resolution: usize,
    per_combo: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (i, (image, hypothesis, label)) in
        entailment_samples(resolution, per_combo, seed).into_iter().enumerate()
    {
        let name = format!("entail_{i:03}.ppm");
        save_ppm(&dir.join(&name), &image)?;
        records.push(EntailmentRecord {
            image: name,
            hypothesis,
            label,
        });
    }
    let manifest = dir.join("entailment.jsonl");
    io::write_manifest(&manifest, &records)?;
    Ok(manifest)
}
