//! Configuration files, dataset manifests, checkpoints, and frozen-weight
//! verification.
//!
//! Every on-disk artifact is byte-deterministic: rendering the same config
//! or writing the same model twice produces identical bytes, with no
//! timestamps anywhere. Checkpoints are single-file archives of named MGT1
//! tensor blobs, each guarded by a CRC32; frozen verification compares those
//! CRCs between a base and a trained checkpoint without decoding payloads.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::mgt;
use crate::tensor::{Dtype, Scalar};
use crate::train::TrainConfig;
use crate::vision::PrefixMode;

/// Everything a run needs: model dimensions, training recipe, the caption
/// prompt, and optional default paths (CLI flags override them).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub caption_prompt: String,
    pub manifest: Option<String>,
    pub checkpoint: Option<String>,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            caption_prompt: crate::eval::DEFAULT_CAPTION_PROMPT.to_string(),
            manifest: None,
            checkpoint: None,
            out: None,
        }
    }
}

/// Parse the `key = value` config format. Blank lines and `#` comments are
/// ignored; unknown or duplicate keys are errors; missing keys fall back to
/// defaults. The single `dropout` key feeds both the prefix dropout and the
/// training config.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: `{line}` is not `key = value`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
        let bad = |what: &str| {
            Error::Config(format!("line {}: {key} = `{value}`: {what}", lineno + 1))
        };
        match key {
            "d_h" => config.model.lm.d_h = value.parse().map_err(|_| bad("not an integer"))?,
            "n_layers" => {
                config.model.lm.n_layers = value.parse().map_err(|_| bad("not an integer"))?
            }
            "n_heads" => {
                config.model.lm.n_heads = value.parse().map_err(|_| bad("not an integer"))?
            }
            "vocab" => {
                config.model.lm.vocab_size = value.parse().map_err(|_| bad("not an integer"))?
            }
            "context" => {
                config.model.lm.context_window =
                    value.parse().map_err(|_| bad("not an integer"))?
            }
            "rotary_base" => {
                config.model.lm.rotary_base = value.parse().map_err(|_| bad("not a number"))?
            }
            "use_bos" => {
                config.model.lm.use_bos = value.parse().map_err(|_| bad("not true/false"))?
            }
            "resolution" => {
                config.model.encoder.resolution =
                    value.parse().map_err(|_| bad("not an integer"))?
            }
            "channels" => {
                config.model.encoder.channels = value
                    .split(',')
                    .map(|c| c.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("not a comma-separated integer list"))?
            }
            "prefix" => {
                config.model.prefix.mode = value.parse::<PrefixMode>()?;
            }
            "prefix_n" => {
                config.model.prefix.pooled_n = value.parse().map_err(|_| bad("not an integer"))?
            }
            "dropout" => {
                let p: f64 = value.parse().map_err(|_| bad("not a number"))?;
                config.model.prefix.dropout_p = p;
                config.train.dropout_p = p;
            }
            "adapters" => {
                config.model.adapters = if value == "--" {
                    None
                } else {
                    Some(AdapterConfig::parse(value)?)
                }
            }
            "batch_size" => {
                config.train.batch_size = value.parse().map_err(|_| bad("not an integer"))?
            }
            "lr_encoder" => {
                config.train.lr_encoder = value.parse().map_err(|_| bad("not a number"))?
            }
            "lr_head" => config.train.lr_head = value.parse().map_err(|_| bad("not a number"))?,
            "total_steps" => {
                config.train.total_steps = value.parse().map_err(|_| bad("not an integer"))?
            }
            "seed" => config.train.seed = value.parse().map_err(|_| bad("not an integer"))?,
            "weight_decay" => {
                config.train.weight_decay = value.parse().map_err(|_| bad("not a number"))?
            }
            "caption_prompt" => config.caption_prompt = value.to_string(),
            "manifest" => config.manifest = Some(value.to_string()),
            "checkpoint" => config.checkpoint = Some(value.to_string()),
            "out" => config.out = Some(value.to_string()),
            _ => {
                return Err(Error::Config(format!(
                    "line {}: unknown config key `{key}`",
                    lineno + 1
                )))
            }
        }
    }
    config.model.validate()?;
    config.train.validate()?;
    Ok(config)
}

/// Canonical text form; `parse_config(render_config(c)) == c` whenever the
/// prefix and training dropout agree (the canonical form ties them).
pub fn render_config(c: &RunConfig) -> String {
    fn kv(out: &mut String, k: &str, v: String) {
        if v.is_empty() {
            out.push_str(k);
            out.push_str(" =\n");
        } else {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    let mut out = String::new();
    out.push_str("# model\n");
    kv(&mut out, "d_h", c.model.lm.d_h.to_string());
    kv(&mut out, "n_layers", c.model.lm.n_layers.to_string());
    kv(&mut out, "n_heads", c.model.lm.n_heads.to_string());
    kv(&mut out, "vocab", c.model.lm.vocab_size.to_string());
    kv(&mut out, "context", c.model.lm.context_window.to_string());
    kv(&mut out, "rotary_base", c.model.lm.rotary_base.to_string());
    kv(&mut out, "use_bos", c.model.lm.use_bos.to_string());
    out.push_str("\n# vision\n");
    kv(&mut out, "resolution", c.model.encoder.resolution.to_string());
    kv(
        &mut out,
        "channels",
        c.model
            .encoder
            .channels
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(&mut out, "prefix", c.model.prefix.mode.to_string());
    kv(&mut out, "prefix_n", c.model.prefix.pooled_n.to_string());
    kv(&mut out, "dropout", c.model.prefix.dropout_p.to_string());
    out.push_str("\n# adapters\n");
    kv(
        &mut out,
        "adapters",
        c.model.adapters.as_ref().map_or("--".to_string(), |a| a.render()),
    );
    out.push_str("\n# training\n");
    kv(&mut out, "batch_size", c.train.batch_size.to_string());
    kv(&mut out, "lr_encoder", c.train.lr_encoder.to_string());
    kv(&mut out, "lr_head", c.train.lr_head.to_string());
    kv(&mut out, "total_steps", c.train.total_steps.to_string());
    kv(&mut out, "seed", c.train.seed.to_string());
    kv(&mut out, "weight_decay", c.train.weight_decay.to_string());
    out.push_str("\n# evaluation\n");
    kv(&mut out, "caption_prompt", c.caption_prompt.clone());
    if c.manifest.is_some() || c.checkpoint.is_some() || c.out.is_some() {
        out.push_str("\n# paths\n");
        if let Some(m) = &c.manifest {
            kv(&mut out, "manifest", m.clone());
        }
        if let Some(p) = &c.checkpoint {
            kv(&mut out, "checkpoint", p.clone());
        }
        if let Some(p) = &c.out {
            kv(&mut out, "out", p.clone());
        }
    }
    out
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// Dataset manifests (JSON-lines)
// ---------------------------------------------------------------------------

/// `{image, caption}` — one training/eval caption pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image: String,
    pub caption: String,
}

/// `{image, question, answers}` — one VQA item.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub image: String,
    pub question: String,
    pub answers: Vec<String>,
}

/// `{image, hypothesis, label}` with label 0=entailment 1=neutral
/// 2=contradiction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EntailmentRecord {
    pub image: String,
    pub hypothesis: String,
    pub label: u8,
}

fn load_manifest_records<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: R = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Resolve an image path relative to its manifest and require it to exist.
fn resolve_image(manifest: &Path, image: &str, line: usize) -> Result<String> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let resolved: PathBuf = dir.join(image);
    if !resolved.is_file() {
        return Err(Error::Manifest {
            path: manifest.display().to_string(),
            line,
            msg: format!("referenced image `{image}` does not exist"),
        });
    }
    Ok(resolved.display().to_string())
}

pub fn load_caption_manifest(path: &Path) -> Result<Vec<CaptionRecord>> {
    let mut records: Vec<CaptionRecord> = load_manifest_records(path)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.image = resolve_image(path, &r.image, i + 1)?;
    }
    Ok(records)
}

pub fn load_qa_manifest(path: &Path) -> Result<Vec<QaRecord>> {
    let mut records: Vec<QaRecord> = load_manifest_records(path)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.image = resolve_image(path, &r.image, i + 1)?;
        if r.answers.is_empty() {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                msg: "QA record with no answers".into(),
            });
        }
    }
    Ok(records)
}

pub fn load_entailment_manifest(path: &Path) -> Result<Vec<EntailmentRecord>> {
    let mut records: Vec<EntailmentRecord> = load_manifest_records(path)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.image = resolve_image(path, &r.image, i + 1)?;
        if r.label > 2 {
            return Err(Error::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("label {} outside 0..=2", r.label),
            });
        }
    }
    Ok(records)
}

/// Write records as JSON-lines (used by the synthetic-data generator).
pub fn write_manifest<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("manifest records serialize infallibly"));
        out.push('\n');
    }
    write_atomic_bytes(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"VLCK";
const CHECKPOINT_VERSION: u32 = 1;

/// One manifest row of a checkpoint archive.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub crc32: u32,
    pub blob_len: u64,
}

/// Parsed archive structure: the embedded config plus the tensor table.
/// Payloads stay in the raw bytes until a full load asks for them.
#[derive(Debug, Clone)]
pub struct CheckpointManifest {
    pub config_text: String,
    pub entries: Vec<TensorEntry>,
}

/// Write-to-temp-then-rename so concurrent readers never see a torn file.
pub fn write_atomic_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialize the model as a checkpoint archive at `path`. The run config is
/// embedded in canonical text form; its model section must agree with the
/// model's actual configuration.
pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    model: &ModelParams<T>,
    config: &RunConfig,
) -> Result<()> {
    if config.model != model.config {
        return Err(Error::Checkpoint(
            "run config disagrees with the model's dimensions; refusing to write".into(),
        ));
    }
    let config_text = render_config(config);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(config_text.as_bytes());
    let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
    model.visit(&mut |name, tensor| {
        let mut blob = Vec::new();
        mgt::write_tensor(&mut blob, tensor).expect("in-memory writes cannot fail");
        blobs.push((name, blob));
    });
    bytes.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, blob) in &blobs {
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(blob);
        let crc = hasher.finalize();
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&crc.to_le_bytes());
        bytes.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        bytes.extend_from_slice(blob);
    }
    write_atomic_bytes(path, &bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::FileFormat {
                path: self.path.display().to_string(),
                msg: "checkpoint truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the archive structure and verify every blob's CRC. Returns the
/// manifest and, for each tensor, its raw blob slice offsets.
fn parse_checkpoint<'a>(
    path: &'a Path,
    bytes: &'a [u8],
) -> Result<(CheckpointManifest, Vec<(usize, usize)>)> {
    let bad = |msg: &str| Error::FileFormat {
        path: path.display().to_string(),
        msg: msg.into(),
    };
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let config_len = c.u64()? as usize;
    let config_text = std::str::from_utf8(c.take(config_len)?)
        .map_err(|_| bad("config block is not UTF-8"))?
        .to_string();
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut spans = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let crc = c.u32()?;
        let blob_len = c.u64()? as usize;
        let start = c.pos;
        let blob = c.take(blob_len)?;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(blob);
        if hasher.finalize() != crc {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` failed its CRC check (corrupt blob)"
            )));
        }
        let header = mgt::read_header(&mut &blob[..], &name).map_err(|_| {
            Error::Checkpoint(format!("tensor `{name}` has a malformed MGT1 header"))
        })?;
        entries.push(TensorEntry {
            name,
            shape: header.shape.clone(),
            dtype: header.dtype,
            crc32: crc,
            blob_len: blob_len as u64,
        });
        spans.push((start, blob_len));
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((CheckpointManifest { config_text, entries }, spans))
}

/// Read only the archive manifest (config text + tensor table). CRCs are
/// still verified — this is the cheap path used by `verify-frozen` and
/// `inspect`.
pub fn read_checkpoint_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path)?;
    let (manifest, _) = parse_checkpoint(path, &bytes)?;
    Ok(manifest)
}

/// Load a full model. If `expected` is given, the checkpoint's tensors must
/// match its dimensions (the error names the offending tensor); otherwise
/// the config embedded in the archive is used.
pub fn read_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ModelParams<T>, RunConfig)> {
    let bytes = fs::read(path)?;
    let (manifest, spans) = parse_checkpoint(path, &bytes)?;
    let mut run_config = parse_config(&manifest.config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
    if let Some(expected) = expected {
        run_config.model = expected.clone();
    }
    // Initialization values are irrelevant; every tensor is overwritten.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model: ModelParams<T> = ModelParams::init(run_config.model.clone(), &mut rng)?;
    if manifest.entries.iter().any(|e| e.name.starts_with("classifier.")) {
        model.add_classifier();
    }

    let mut loaded: HashMap<&str, (&TensorEntry, &[u8])> = HashMap::new();
    for (entry, &(start, len)) in manifest.entries.iter().zip(&spans) {
        loaded.insert(entry.name.as_str(), (entry, &bytes[start..start + len]));
    }
    let mut failure = None;
    model.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let Some((entry, blob)) = loaded.remove(name.as_str()) else {
            failure = Some(Error::Checkpoint(format!(
                "checkpoint is missing tensor `{name}`"
            )));
            return;
        };
        if entry.shape != tensor.shape() {
            failure = Some(Error::Checkpoint(format!(
                "tensor `{name}`: checkpoint shape {:?} but the config wants {:?}",
                entry.shape,
                tensor.shape()
            )));
            return;
        }
        match mgt::read_tensor::<T, _>(&mut &blob[..], &name) {
            Ok(t) => tensor.data_mut().copy_from_slice(t.data()),
            Err(e) => failure = Some(Error::Checkpoint(format!("tensor `{name}`: {e}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint contains tensor `{extra}` that the config does not define"
        )));
    }
    Ok((model, run_config))
}

// ---------------------------------------------------------------------------
// Frozen verification
// ---------------------------------------------------------------------------

/// Outcome of comparing the frozen (LM) tensor set between two checkpoints.
#[derive(Debug, Clone)]
pub struct FrozenReport {
    pub checked: usize,
    pub changed: Vec<String>,
}

impl FrozenReport {
    pub fn pass(&self) -> bool {
        self.changed.is_empty()
    }
}

/// Compare CRC32s of every `lm.*` tensor between a base checkpoint and one
/// produced after training. Passes iff all are byte-identical. The two
/// archives must contain the same frozen tensor names.
pub fn verify_frozen(base: &Path, after: &Path) -> Result<FrozenReport> {
    let frozen = |m: &CheckpointManifest| -> HashMap<String, u32> {
        m.entries
            .iter()
            .filter(|e| e.name.starts_with("lm."))
            .map(|e| (e.name.clone(), e.crc32))
            .collect()
    };
    let base_m = frozen(&read_checkpoint_manifest(base)?);
    let after_m = frozen(&read_checkpoint_manifest(after)?);
    let mut base_names: Vec<&String> = base_m.keys().collect();
    let mut after_names: Vec<&String> = after_m.keys().collect();
    base_names.sort();
    after_names.sort();
    if base_names != after_names {
        return Err(Error::Checkpoint(format!(
            "frozen tensor sets differ: base has {}, after has {}",
            base_names.len(),
            after_names.len()
        )));
    }
    let mut changed: Vec<String> = base_m
        .iter()
        .filter(|(name, crc)| after_m[*name] != **crc)
        .map(|(name, _)| name.clone())
        .collect();
    changed.sort();
    Ok(FrozenReport {
        checked: base_m.len(),
        changed,
    })
}
