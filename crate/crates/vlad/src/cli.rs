//! Command-line front end. Nine verbs cover the full workflow: pretraining
//! the text backbone, multimodal training, entailment finetuning, the three
//! evaluations, one-off generation, frozen-weight verification, and
//! checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage or configuration errors, 2 data and
//! format errors, 3 numeric failures (a NaN loss aborts before any
//! parameter update). The seed is resolved as `--seed` flag, then the
//! `MAGMA_SEED` environment variable, then the config file.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{
    evaluate_captions, evaluate_vqa, CaptionExample, FewShotSpec, PromptBudget, PromptPiece,
    PromptPlan, QAExample,
};
use crate::io::{
    load_caption_manifest, load_config, load_entailment_manifest, load_qa_manifest,
    read_checkpoint, read_checkpoint_manifest, verify_frozen, write_checkpoint, RunConfig,
};
use crate::lm::tokenizer::{detokenize, tokenize, TokenSequence};
use crate::lm::{generate_greedy, PromptSequence};
use crate::model::{prefix_tensor, ModelParams, Visual};
use crate::train::{
    finetune_classifier, pretrain_lm, train_multimodal, CaptionSample, EntailmentSample,
    MetricsLog,
};
use crate::vision::ppm::load_ppm;

/// Newline ends a generated answer; 16 tokens is the hard cap.
const MAX_NEW_TOKENS: usize = 16;
const STOP_TOKENS: [usize; 1] = [b'\n' as usize];

#[derive(Parser)]
#[command(
    name = "vlad",
    version,
    about = "Train and evaluate a frozen language model with visual adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the language model on a plain text file (one line per
    /// sequence); writes a checkpoint and a metrics log.
    PretrainLm {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plain UTF-8 text, one training line per line.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the visual side (encoder, prefix, adapters) on caption pairs
    /// with the language model frozen.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Caption manifest (JSON-lines `{image, caption}`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Starting checkpoint; omit to start from random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Add a 3-way entailment head and finetune on an entailment manifest;
    /// reports held-out accuracy on an internal 1/3 split.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Entailment manifest (JSON-lines `{image, hypothesis, label}`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Few-shot visual question answering over a QA manifest.
    EvalVqa {
        #[arg(long)]
        config: Option<PathBuf>,
        /// QA manifest (JSON-lines `{image, question, answers}`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Completed examples to prepend to each query.
        #[arg(long, default_value_t = 0)]
        shots: usize,
        /// Write per-item records here (JSON-lines); summary goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Caption generation scored with corpus BLEU@4 against the manifest.
    EvalCaption {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Entailment accuracy of a finetuned checkpoint over a manifest.
    EvalEntailment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a continuation for one image and an optional text prompt
    /// (defaults to the config's caption prompt).
    Generate {
        /// Image file (PPM).
        image: PathBuf,
        /// Text placed after the image; omit for the caption prompt.
        prompt: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify that the frozen language model weights are byte-identical
    /// between two checkpoints (by CRC32).
    VerifyFrozen {
        /// Checkpoint from before training.
        base: PathBuf,
        /// Checkpoint from after training.
        after: PathBuf,
    },
    /// Print a checkpoint's embedded config and tensor table.
    Inspect {
        checkpoint: PathBuf,
    },
}

/// Entry point used by the binary: parse, dispatch, map errors to exit
/// codes. Help and version requests exit 0.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::PretrainLm { config, manifest, out, seed } => {
            cmd_pretrain_lm(config.as_deref(), manifest, out, seed)
        }
        Command::Train { config, manifest, checkpoint, out, seed } => {
            cmd_train(config.as_deref(), manifest, checkpoint.as_deref(), out, seed)
        }
        Command::Finetune { config, manifest, checkpoint, out, seed } => {
            cmd_finetune(config.as_deref(), manifest, &checkpoint, out, seed)
        }
        Command::EvalVqa { config, manifest, checkpoint, shots, out, seed } => {
            cmd_eval_vqa(config.as_deref(), manifest, &checkpoint, shots, out.as_deref(), seed)
        }
        Command::EvalCaption { config, manifest, checkpoint, out, seed } => {
            cmd_eval_caption(config.as_deref(), manifest, &checkpoint, out.as_deref(), seed)
        }
        Command::EvalEntailment { config, manifest, checkpoint, out, seed } => {
            cmd_eval_entailment(config.as_deref(), manifest, &checkpoint, out.as_deref(), seed)
        }
        Command::Generate { image, prompt, config, checkpoint, out, seed } => {
            cmd_generate(&image, prompt, config.as_deref(), &checkpoint, out.as_deref(), seed)
        }
        Command::VerifyFrozen { base, after } => cmd_verify_frozen(&base, &after),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// `--seed` flag beats `MAGMA_SEED` beats the config file.
fn apply_seed(config: &mut RunConfig, flag: Option<u64>) -> Result<()> {
    if let Some(s) = flag {
        config.train.seed = s;
        return Ok(());
    }
    if let Ok(v) = std::env::var("MAGMA_SEED") {
        config.train.seed = v.parse().map_err(|_| {
            Error::Usage(format!("MAGMA_SEED must be an unsigned integer, got `{v}`"))
        })?;
    }
    Ok(())
}

/// Resolve the run config: an explicit `--config` wins, then the config
/// embedded in a checkpoint, then built-in defaults.
fn resolve_config(flag: Option<&Path>, checkpoint: Option<&Path>) -> Result<RunConfig> {
    if let Some(path) = flag {
        return load_config(path);
    }
    if let Some(path) = checkpoint {
        let manifest = read_checkpoint_manifest(path)?;
        return crate::io::parse_config(&manifest.config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")));
    }
    Ok(RunConfig::default())
}

/// Load a model, enforcing the resolved config's dimensions when the user
/// supplied an explicit `--config`.
fn load_model(
    checkpoint: &Path,
    config: &RunConfig,
    explicit_config: bool,
) -> Result<ModelParams<f32>> {
    let expected = explicit_config.then_some(&config.model);
    let (model, _) = read_checkpoint::<f32>(checkpoint, expected)?;
    Ok(model)
}

fn required(path: Option<PathBuf>, fallback: &Option<String>, flag: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Usage(format!("missing --{flag} (no config fallback either)")))
}

/// The metrics log sits next to the checkpoint: `model.vlck` →
/// `model.metrics`.
fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics")
}

fn open_metrics(out: &Path) -> Result<MetricsLog<BufWriter<fs::File>>> {
    MetricsLog::new(BufWriter::new(fs::File::create(metrics_path(out))?))
}

/// Write to `--out` atomically, or print to stdout when no path was given.
fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => crate::io::write_atomic_bytes(path, content.as_bytes()),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn summary_line<S: Serialize>(summary: &S) -> String {
    serde_json::to_string(summary).expect("summaries serialize infallibly")
}

/// Turn caption records into training samples: crop to the encoder's
/// resolution, prepend the caption prompt, append a newline terminator.
fn caption_samples(
    records: &[crate::io::CaptionRecord],
    config: &RunConfig,
) -> Result<Vec<CaptionSample<f32>>> {
    records
        .iter()
        .map(|r| {
            let image = load_ppm(Path::new(&r.image))?
                .center_crop_resize(config.model.encoder.resolution);
            let text = if config.caption_prompt.is_empty() {
                r.caption.clone()
            } else {
                format!("{} {}", config.caption_prompt, r.caption)
            };
            Ok(CaptionSample {
                visual: Visual::Image(image),
                caption: tokenize(&format!("{text}\n")),
            })
        })
        .collect()
}

fn entailment_samples(
    records: &[crate::io::EntailmentRecord],
    config: &RunConfig,
) -> Result<Vec<EntailmentSample<f32>>> {
    records
        .iter()
        .map(|r| {
            let image = load_ppm(Path::new(&r.image))?
                .center_crop_resize(config.model.encoder.resolution);
            Ok(EntailmentSample {
                visual: Visual::Image(image),
                hypothesis: r.hypothesis.clone(),
                label: r.label as usize,
            })
        })
        .collect()
}

/// Materialize a prompt plan against the model and decode greedily until a
/// newline or the token cap. Returns the new text without the terminator.
fn respond_with_model(model: &ModelParams<f32>, plan: &PromptPlan) -> Result<String> {
    let resolution = model.config.encoder.resolution;
    let mut prompt = PromptSequence::new();
    for piece in &plan.pieces {
        match piece {
            PromptPiece::Image(path) => {
                let image = load_ppm(Path::new(path))?.center_crop_resize(resolution);
                let prefix = prefix_tensor(model, &Visual::Image(image))?;
                prompt.push_prefix(prefix);
            }
            PromptPiece::Text(text) => prompt.push_tokens(&tokenize(text).0),
        }
    }
    let generated = generate_greedy(
        &prompt,
        &model.lm,
        model.adapters.as_ref(),
        MAX_NEW_TOKENS,
        &STOP_TOKENS,
    )?;
    Ok(detokenize(&generated.0).trim_end_matches('\n').to_string())
}

fn records_jsonl<S: Serialize>(records: &[S]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize infallibly"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Training verbs
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: f64,
    checkpoint: String,
}

fn cmd_pretrain_lm(
    config_flag: Option<&Path>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, None)?;
    apply_seed(&mut config, seed)?;
    let manifest = required(manifest, &config.manifest, "manifest")?;
    let out = required(out, &config.out, "out")?;
    let text = fs::read_to_string(&manifest).map_err(|e| Error::FileFormat {
        path: manifest.display().to_string(),
        msg: e.to_string(),
    })?;
    let corpus: Vec<TokenSequence> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(&format!("{l}\n")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut model: ModelParams<f32> = ModelParams::init(config.model.clone(), &mut rng)?;
    let mut log = open_metrics(&out)?;
    let last = pretrain_lm(&mut model, &corpus, &config.train, &mut log, |_, _| {})?;
    write_checkpoint(&out, &model, &config)?;
    println!(
        "{}",
        summary_line(&TrainSummary {
            steps: config.train.total_steps,
            final_loss: last.mean,
            checkpoint: out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_train(
    config_flag: Option<&Path>,
    manifest: Option<PathBuf>,
    checkpoint: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, checkpoint)?;
    apply_seed(&mut config, seed)?;
    let manifest = required(manifest, &config.manifest, "manifest")?;
    let out = required(out, &config.out, "out")?;
    let mut model = match checkpoint {
        Some(path) => load_model(path, &config, config_flag.is_some())?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
            ModelParams::init(config.model.clone(), &mut rng)?
        }
    };
    let records = load_caption_manifest(&manifest)?;
    let samples = caption_samples(&records, &config)?;
    let mut log = open_metrics(&out)?;
    let last = train_multimodal(&mut model, &samples, &config.train, &mut log, |_, _| {})?;
    write_checkpoint(&out, &model, &config)?;
    println!(
        "{}",
        summary_line(&TrainSummary {
            steps: config.train.total_steps,
            final_loss: last.mean,
            checkpoint: out.display().to_string(),
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct FinetuneSummary {
    steps: usize,
    train_items: usize,
    heldout_items: usize,
    heldout_accuracy: f64,
    checkpoint: String,
}

fn cmd_finetune(
    config_flag: Option<&Path>,
    manifest: Option<PathBuf>,
    checkpoint: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, Some(checkpoint))?;
    apply_seed(&mut config, seed)?;
    let manifest = required(manifest, &config.manifest, "manifest")?;
    let out = required(out, &config.out, "out")?;
    let mut model = load_model(checkpoint, &config, config_flag.is_some())?;
    let records = load_entailment_manifest(&manifest)?;
    let samples = entailment_samples(&records, &config)?;
    // Deterministic 2/3 : 1/3 split after a seeded shuffle.
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    use rand::seq::SliceRandom;
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5eed));
    let cut = samples.len() * 2 / 3;
    let train: Vec<EntailmentSample<f32>> =
        indices[..cut].iter().map(|&i| samples[i].clone()).collect();
    let heldout: Vec<EntailmentSample<f32>> =
        indices[cut..].iter().map(|&i| samples[i].clone()).collect();
    let mut log = open_metrics(&out)?;
    let accuracy =
        finetune_classifier(&mut model, &train, &heldout, &config.train, &mut log, |_, _| {})?;
    write_checkpoint(&out, &model, &config)?;
    println!(
        "{}",
        summary_line(&FinetuneSummary {
            steps: config.train.total_steps,
            train_items: train.len(),
            heldout_items: heldout.len(),
            heldout_accuracy: accuracy,
            checkpoint: out.display().to_string(),
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation verbs
// ---------------------------------------------------------------------------

fn cmd_eval_vqa(
    config_flag: Option<&Path>,
    manifest: Option<PathBuf>,
    checkpoint: &Path,
    shots: usize,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, Some(checkpoint))?;
    apply_seed(&mut config, seed)?;
    let manifest = required(manifest, &config.manifest, "manifest")?;
    let model = load_model(checkpoint, &config, config_flag.is_some())?;
    let records = load_qa_manifest(&manifest)?;
    let items: Vec<QAExample> = records
        .iter()
        .enumerate()
        .map(|(i, r)| QAExample {
            id: format!("qa-{i:03}"),
            image: r.image.clone(),
            question: r.question.clone(),
            ground_truths: r.answers.clone(),
        })
        .collect();
    let spec = FewShotSpec {
        n_shots: shots,
        seed: config.train.seed,
    };
    let budget = PromptBudget {
        prefix_len: config.model.prefix_len(),
        context_window: config.model.lm.context_window,
        reserve: MAX_NEW_TOKENS + 1,
    };
    let (summary, item_records) = evaluate_vqa(&items, &spec, Some(&budget), |plan| {
        respond_with_model(&model, plan)
    })?;
    emit(out, &records_jsonl(&item_records))?;
    println!("{}", summary_line(&summary));
    Ok(())
}

fn cmd_eval_caption(
    config_flag: Option<&Path>,
    manifest: Option<PathBuf>,
    checkpoint: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, Some(checkpoint))?;
    apply_seed(&mut config, seed)?;
    let manifest = required(manifest, &config.manifest, "manifest")?;
    let model = load_model(checkpoint, &config, config_flag.is_some())?;
    let records = load_caption_manifest(&manifest)?;
    let items: Vec<CaptionExample> = records
        .iter()
        .enumerate()
        .map(|(i, r)| CaptionExample {
            id: format!("cap-{i:03}"),
            image: r.image.clone(),
            references: vec![r.caption.clone()],
        })
        .collect();
    let (summary, item_records) = evaluate_captions(&items, &config.caption_prompt, |plan| {
        respond_with_model(&model, plan)
    })?;
    emit(out, &records_jsonl(&item_records))?;
    println!("{}", summary_line(&summary));
    Ok(())
}

#[derive(Serialize)]
struct EntailmentRecordOut {
    id: String,
    hypothesis: String,
    label: usize,
    predicted: usize,
    correct: bool,
}

#[derive(Serialize)]
struct EntailmentSummary {
    items: usize,
    accuracy: f64,
}

fn cmd_eval_entailment(
    config_flag: Option<&Path>,
    manifest: Option<PathBuf>,
    checkpoint: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, Some(checkpoint))?;
    apply_seed(&mut config, seed)?;
    let manifest = required(manifest, &config.manifest, "manifest")?;
    let model = load_model(checkpoint, &config, config_flag.is_some())?;
    if model.classifier.is_none() {
        return Err(Error::Checkpoint(
            "checkpoint has no entailment head; run `finetune` first".into(),
        ));
    }
    let records = load_entailment_manifest(&manifest)?;
    let samples = entailment_samples(&records, &config)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("entailment dataset".into()));
    }
    let mut outputs = Vec::new();
    let mut hits = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        let predicted = crate::train::classify_entailment(&model, sample)?;
        let correct = predicted == sample.label;
        hits += correct as usize;
        outputs.push(EntailmentRecordOut {
            id: format!("ent-{i:03}"),
            hypothesis: sample.hypothesis.clone(),
            label: sample.label,
            predicted,
            correct,
        });
    }
    emit(out, &records_jsonl(&outputs))?;
    println!(
        "{}",
        summary_line(&EntailmentSummary {
            items: samples.len(),
            accuracy: hits as f64 / samples.len() as f64,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Generation, verification, inspection
// ---------------------------------------------------------------------------

fn cmd_generate(
    image: &Path,
    prompt: Option<String>,
    config_flag: Option<&Path>,
    checkpoint: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = resolve_config(config_flag, Some(checkpoint))?;
    apply_seed(&mut config, seed)?;
    let model = load_model(checkpoint, &config, config_flag.is_some())?;
    let prompt = prompt.unwrap_or_else(|| config.caption_prompt.clone());
    let plan = PromptPlan {
        pieces: vec![
            PromptPiece::Image(image.display().to_string()),
            PromptPiece::Text(prompt),
        ],
    };
    let text = respond_with_model(&model, &plan)?;
    emit(out, &format!("{text}\n"))
}

fn cmd_verify_frozen(base: &Path, after: &Path) -> Result<()> {
    let report = verify_frozen(base, after)?;
    if report.pass() {
        println!("PASS: {} frozen tensors byte-identical", report.checked);
        Ok(())
    } else {
        println!(
            "FAIL: {} of {} frozen tensors changed",
            report.changed.len(),
            report.checked
        );
        for name in &report.changed {
            println!("  changed: {name}");
        }
        Err(Error::Checkpoint(format!(
            "frozen weights changed: {}",
            report.changed.join(", ")
        )))
    }
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let manifest = read_checkpoint_manifest(checkpoint)?;
    println!("# embedded config");
    print!("{}", manifest.config_text);
    println!();
    println!("# tensors ({})", manifest.entries.len());
    let mut total = 0usize;
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        total += numel;
        let dims = e
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{} {} {:?} crc32={:08x} bytes={}",
            e.name, dims, e.dtype, e.crc32, e.blob_len
        );
    }
    println!("total parameters: {total}");
    Ok(())
}
