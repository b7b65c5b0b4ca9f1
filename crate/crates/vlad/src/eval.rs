//! Open-ended generative evaluation: few-shot prompt assembly, VQA answer
//! normalization and consensus accuracy, and corpus BLEU@4 captioning.
//!
//! Metric functions here are pure text processing — they know nothing about
//! the model. The two `evaluate_*` drivers take a responder closure that
//! turns an assembled [`PromptPlan`] into generated text, so they can be
//! exercised with the real model, a recorded transcript, or a synthetic
//! oracle interchangeably.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// One VQA item: an image reference, a question, and the ground-truth
/// answer set (typically 10 annotator strings).
#[derive(Debug, Clone)]
pub struct QAExample {
    pub id: String,
    /// Opaque image key (usually a file path) passed through to the responder.
    pub image: String,
    pub question: String,
    pub ground_truths: Vec<String>,
}

/// One captioning item: an image reference plus one or more references.
#[derive(Debug, Clone)]
pub struct CaptionExample {
    pub id: String,
    pub image: String,
    pub references: Vec<String>,
}

/// Few-shot protocol: how many completed examples to prepend, and the seed
/// that makes shot selection reproducible.
#[derive(Debug, Clone, Copy)]
pub struct FewShotSpec {
    pub n_shots: usize,
    pub seed: u64,
}

/// A prompt as structure: image slots interleaved with literal text. The
/// model-facing caller materializes image pieces as prefix embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPiece {
    Image(String),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptPlan {
    pub pieces: Vec<PromptPiece>,
}

impl PromptPlan {
    pub fn image_count(&self) -> usize {
        self.pieces
            .iter()
            .filter(|p| matches!(p, PromptPiece::Image(_)))
            .count()
    }

    /// Total byte length of the text pieces (= token count for the byte
    /// tokenizer).
    pub fn text_tokens(&self) -> usize {
        self.pieces
            .iter()
            .map(|p| match p {
                PromptPiece::Text(t) => t.len(),
                PromptPiece::Image(_) => 0,
            })
            .sum()
    }

    /// Canonical text rendering with `[IMG]` standing in for each image —
    /// the golden-file format for prompt-structure checks.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                PromptPiece::Image(_) => out.push_str("[IMG]"),
                PromptPiece::Text(t) => out.push_str(t),
            }
        }
        out
    }
}

/// The most frequent ground-truth answer, ties broken by lexicographic
/// order — the answer string used when an example appears as a shot.
pub fn modal_answer(ground_truths: &[String]) -> String {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in ground_truths {
        *counts.entry(g.as_str()).or_insert(0) += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (s, c) in counts {
        best = Some(match best {
            None => (s, c),
            Some((bs, bc)) => {
                if c > bc || (c == bc && s < bs) {
                    (s, c)
                } else {
                    (bs, bc)
                }
            }
        });
    }
    best.map(|(s, _)| s.to_string()).unwrap_or_default()
}

/// Interleave completed shots before the query: each shot is its image
/// followed by `Q: {q}\nA: {a}\n`, and the query ends after `A:` so
/// generation begins at the answer.
pub fn assemble_prompt(shots: &[(&QAExample, String)], query: &QAExample) -> PromptPlan {
    let mut pieces = Vec::with_capacity(2 * (shots.len() + 1));
    for (ex, answer) in shots {
        pieces.push(PromptPiece::Image(ex.image.clone()));
        pieces.push(PromptPiece::Text(format!(
            "Q: {}\nA: {}\n",
            ex.question, answer
        )));
    }
    pieces.push(PromptPiece::Image(query.image.clone()));
    pieces.push(PromptPiece::Text(format!("Q: {}\nA:", query.question)));
    PromptPlan { pieces }
}

/// Pick shot indices for `query_idx`: without replacement, never the query
/// itself, deterministic in (seed, query index).
pub fn select_shots(pool_len: usize, query_idx: usize, spec: &FewShotSpec) -> Vec<usize> {
    let available = pool_len.saturating_sub(1);
    let n = spec.n_shots.min(available);
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(query_idx as u64),
    );
    rand::seq::index::sample(&mut rng, available, n)
        .into_iter()
        .map(|i| if i >= query_idx { i + 1 } else { i })
        .collect()
}

/// Sequence-length budget for prompt fitting: each image costs `prefix_len`
/// positions, text costs one per byte, and `reserve` positions are kept for
/// generation.
#[derive(Debug, Clone, Copy)]
pub struct PromptBudget {
    pub prefix_len: usize,
    pub context_window: usize,
    pub reserve: usize,
}

impl PromptBudget {
    fn cost(&self, plan: &PromptPlan) -> usize {
        plan.image_count() * self.prefix_len + plan.text_tokens() + self.reserve
    }
}

/// Drop the oldest shots until the prompt fits the budget. Returns the
/// final plan and how many shots were dropped.
pub fn fit_prompt(
    mut shots: Vec<(&QAExample, String)>,
    query: &QAExample,
    budget: &PromptBudget,
) -> (PromptPlan, usize) {
    let mut dropped = 0;
    loop {
        let plan = assemble_prompt(&shots, query);
        if budget.cost(&plan) <= budget.context_window || shots.is_empty() {
            return (plan, dropped);
        }
        shots.remove(0);
        dropped += 1;
    }
}

const NUMBER_WORDS: [(&str, &str); 11] = [
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];

/// VQA answer normalization. The rule list is normative here: lowercase;
/// punctuation removed, except apostrophes kept between two alphanumerics;
/// standalone articles a/an/the dropped; number words zero–ten mapped to
/// digits; whitespace collapsed to single spaces and trimmed. Idempotent.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut cleaned = String::with_capacity(lower.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.push(c);
        } else if c == '\'' {
            let prev_ok = i > 0 && chars[i - 1].is_alphanumeric();
            let next_ok = i + 1 < chars.len() && chars[i + 1].is_alphanumeric();
            if prev_ok && next_ok {
                cleaned.push(c);
            } else {
                cleaned.push(' ');
            }
        } else {
            // Whitespace and all other punctuation become separators.
            cleaned.push(' ');
        }
    }
    let mut words = Vec::new();
    for w in cleaned.split_whitespace() {
        if matches!(w, "a" | "an" | "the") {
            continue;
        }
        match NUMBER_WORDS.iter().find(|(word, _)| *word == w) {
            Some((_, digit)) => words.push(*digit),
            None => words.push(w),
        }
    }
    words.join(" ")
}

/// Cap the model output at the word count of the longest normalized ground
/// truth.
pub fn truncate_answer(output: &str, normalized_ground_truths: &[String]) -> String {
    let k = normalized_ground_truths
        .iter()
        .map(|g| g.split_whitespace().count())
        .max()
        .unwrap_or(0);
    output
        .split_whitespace()
        .take(k)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Consensus accuracy: mean over the 10 leave-one-out annotator subsets of
/// `min(matches/3, 1)`. Ground-truth sets of any other size fall back to
/// the single-subset formula.
pub fn vqa_accuracy(answer: &str, ground_truths: &[String]) -> f64 {
    let matches = ground_truths.iter().filter(|g| g.as_str() == answer).count();
    if ground_truths.len() != 10 {
        return (matches as f64 / 3.0).min(1.0);
    }
    let mut total = 0.0;
    for i in 0..10 {
        let in_subset = matches - usize::from(ground_truths[i] == answer);
        total += (in_subset as f64 / 3.0).min(1.0);
    }
    total / 10.0
}

fn bleu_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.join("\u{1}")).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU@4: uniform weights over 1–4-gram modified precisions,
/// multiplicative brevity penalty, no smoothing — if any precision is zero
/// the score is zero. Reference length uses the closest reference per
/// candidate (ties to the shorter).
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyDataset("caption candidates".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Config(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Config("caption item with no references".into()));
        }
        let cand = bleu_tokens(cand);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| bleu_tokens(r)).collect();
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand_grams = ngram_counts(&cand, n);
            let mut best_ref: HashMap<String, usize> = HashMap::new();
            for r in &refs {
                for (gram, count) in ngram_counts(r, n) {
                    let e = best_ref.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &cand_grams {
                possible[n - 1] += count;
                matched[n - 1] += count.min(best_ref.get(gram).unwrap_or(&0));
            }
        }
    }
    let mut log_precision_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 || possible[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched[n] as f64 / possible[n] as f64).ln();
    }
    let bp = if cand_len > ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_precision_sum / 4.0).exp())
}

/// Per-item result record, emitted as one JSON line.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ItemRecord {
    pub id: String,
    pub question: String,
    pub raw_output: String,
    pub normalized: String,
    pub truncated: String,
    pub score: f64,
}

/// Final summary object for a VQA run.
#[derive(Debug, Clone, Serialize)]
pub struct VqaSummary {
    pub items: usize,
    pub skipped: usize,
    pub mean_accuracy: f64,
}

/// Final summary object for a captioning run.
#[derive(Debug, Clone, Serialize)]
pub struct CaptionSummary {
    pub items: usize,
    pub skipped: usize,
    pub bleu4: f64,
}

fn first_line(raw: &str) -> &str {
    raw.split('\n').next().unwrap_or("").trim()
}

/// Run the VQA protocol: for each item, assemble a few-shot prompt, ask the
/// responder for a completion, then normalize → truncate → score. Responder
/// failures skip the item (reported on stderr) rather than aborting the run.
pub fn evaluate_vqa(
    items: &[QAExample],
    spec: &FewShotSpec,
    budget: Option<&PromptBudget>,
    mut respond: impl FnMut(&PromptPlan) -> Result<String>,
) -> Result<(VqaSummary, Vec<ItemRecord>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("VQA dataset".into()));
    }
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut total = 0.0;
    for (idx, item) in items.iter().enumerate() {
        if item.ground_truths.is_empty() {
            return Err(Error::Config(format!("item {} has no ground truths", item.id)));
        }
        let shots: Vec<(&QAExample, String)> = select_shots(items.len(), idx, spec)
            .into_iter()
            .map(|i| (&items[i], modal_answer(&items[i].ground_truths)))
            .collect();
        let plan = match budget {
            Some(b) => {
                let (plan, dropped) = fit_prompt(shots, item, b);
                if dropped > 0 {
                    eprintln!(
                        "warning: item {}: dropped {dropped} oldest shot(s) to fit the context window",
                        item.id
                    );
                }
                plan
            }
            None => assemble_prompt(&shots, item),
        };
        let raw = match respond(&plan) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: item {}: {e}; skipping", item.id);
                skipped += 1;
                continue;
            }
        };
        let gts: Vec<String> = item.ground_truths.iter().map(|g| normalize_answer(g)).collect();
        if item.ground_truths.len() != 10 {
            eprintln!(
                "warning: item {}: {} ground truths (expected 10); using single-subset accuracy",
                item.id,
                item.ground_truths.len()
            );
        }
        let normalized = normalize_answer(first_line(&raw));
        let truncated = truncate_answer(&normalized, &gts);
        let score = vqa_accuracy(&truncated, &gts);
        total += score;
        records.push(ItemRecord {
            id: item.id.clone(),
            question: item.question.clone(),
            raw_output: raw,
            normalized,
            truncated,
            score,
        });
    }
    let summary = VqaSummary {
        items: records.len(),
        skipped,
        mean_accuracy: if records.is_empty() { 0.0 } else { total / records.len() as f64 },
    };
    Ok((summary, records))
}

/// Default captioning prompt; alternatives like `Caption:` work too and are
/// configurable at the call site.
pub const DEFAULT_CAPTION_PROMPT: &str = "A picture of";

/// Caption every image, prompting with `[image][prompt_prefix]`, and score
/// the whole corpus with BLEU@4. Per-item records carry a single-item BLEU
/// for inspection; the summary holds the corpus score.
pub fn evaluate_captions(
    items: &[CaptionExample],
    prompt_prefix: &str,
    mut respond: impl FnMut(&PromptPlan) -> Result<String>,
) -> Result<(CaptionSummary, Vec<ItemRecord>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("caption dataset".into()));
    }
    let mut records = Vec::new();
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    let mut skipped = 0usize;
    for item in items {
        if item.references.is_empty() {
            return Err(Error::Config(format!("item {} has no references", item.id)));
        }
        let mut pieces = vec![PromptPiece::Image(item.image.clone())];
        if !prompt_prefix.is_empty() {
            pieces.push(PromptPiece::Text(prompt_prefix.to_string()));
        }
        let plan = PromptPlan { pieces };
        let raw = match respond(&plan) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: item {}: {e}; skipping", item.id);
                skipped += 1;
                continue;
            }
        };
        let candidate = first_line(&raw).to_string();
        let item_bleu = bleu4(
            std::slice::from_ref(&candidate),
            std::slice::from_ref(&item.references),
        )?;
        records.push(ItemRecord {
            id: item.id.clone(),
            question: prompt_prefix.to_string(),
            raw_output: raw,
            normalized: candidate.to_lowercase(),
            truncated: candidate.clone(),
            score: item_bleu,
        });
        candidates.push(candidate);
        references.push(item.references.clone());
    }
    let corpus = if candidates.is_empty() {
        0.0
    } else {
        bleu4(&candidates, &references)?
    };
    Ok((
        CaptionSummary {
            items: records.len(),
            skipped,
            bleu4: corpus,
        },
        records,
    ))
}
