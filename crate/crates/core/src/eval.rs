//! Palette completion, text-to-palette generation and the evaluation metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{code_to_hex, lab_distance, order_palette, ColorCode, MAX_PALETTE_LEN, NUM_CODES};
use crate::corpus::{
    build_sequence, mask_exact, token_color, CorpusError, DocumentSample, SequenceMode, TokenSequence, MASK, PAD,
    SEP,
};
use crate::model::{color_distribution, ranked, Batch, MaskedColorModel, SlotPrediction};
use crate::nn::{NnError, Scalar};
use crate::text_embed::{EmbedError, EmbeddingProvider, TextContext};

const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no positions to complete")]
    NoPositions,
    #[error("generation length {0} outside 1..=5")]
    Length(usize),
    #[error("mask count {0} outside 1..=15")]
    MaskCount(usize),
    #[error("no document has at least {0} colors to mask")]
    NoQualifying(usize),
    #[error("palette has {0} colors, diversity needs exactly 5")]
    DiversityLength(usize),
    #[error("palette similarity needs two non-empty palettes")]
    EmptyPalette,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top-`k` recommendations for `positions` of `doc`, all masked at once.
/// `k` is clamped to the 4096 colors.
pub fn complete<T: Scalar>(
    model: &MaskedColorModel<T>,
    doc: &DocumentSample,
    mode: SequenceMode,
    positions: &[usize],
    text: &TextContext,
    k: usize,
) -> Result<Vec<SlotPrediction>, EvalError> {
    if positions.is_empty() {
        return Err(EvalError::NoPositions);
    }
    let seq = mask_exact(&build_sequence(doc, mode), positions)?;
    Ok(model.predict_masked(&seq, text, k.clamp(1, NUM_CODES))?)
}

/// Pat-layout sequence with `length` `[MASK]` slots, `[PAD]` up to five
/// slots, then `[SEP]`.
pub fn generation_sequence(length: usize) -> Result<TokenSequence, EvalError> {
    if !(1..=MAX_PALETTE_LEN).contains(&length) {
        return Err(EvalError::Length(length));
    }
    let len = SequenceMode::Pat.len();
    let mut tokens = vec![PAD; len];
    tokens[..length].fill(MASK);
    tokens[len - 1] = SEP;
    Ok(TokenSequence {
        tokens,
        segments: vec![1; len],
        positions: (0..len).collect(),
        color_mask: (0..len).map(|i| i < length).collect(),
        labels: vec![None; len],
    })
}

/// Picks one color per slot. Without post-processing each slot takes its
/// argmax. With it, slots are visited left to right and a slot whose argmax
/// was already taken falls through to its next most probable unused color.
pub fn decode_slots(distributions: &[Vec<f64>], post_process: bool) -> Vec<ColorCode> {
    let mut chosen: Vec<ColorCode> = Vec::with_capacity(distributions.len());
    for dist in distributions {
        let order = ranked(dist);
        let pick = if post_process {
            order.into_iter().map(code).find(|c| !chosen.contains(c)).expect("fewer slots than colors")
        } else {
            code(order[0])
        };
        chosen.push(pick);
    }
    chosen
}

fn code(i: usize) -> ColorCode {
    ColorCode::new(i as u32).expect("index below 4096")
}

/// Palette of `length` colors for the phrases in `text`, lightness-ordered.
pub fn generate<T: Scalar>(
    model: &MaskedColorModel<T>,
    text: &TextContext,
    length: usize,
    post_process: bool,
) -> Result<Vec<ColorCode>, EvalError> {
    let seq = generation_sequence(length)?;
    let dists = model.color_distributions(&seq, text)?;
    Ok(order_palette(decode_slots(&dists, post_process)).expect("at most five slots"))
}

/// Accuracy@1 over masked positions, plus the all-correct document rate and
/// the entropy of correctly predicted codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_count: usize,
    pub accuracy_at_1: f64,
    /// Fraction of documents whose masked colors were all predicted.
    pub all_correct_at_1: f64,
    /// Shannon entropy (bits) of the correctly predicted codes.
    pub distribution_at_1: f64,
    pub documents: usize,
    pub samples: usize,
    pub correct: usize,
    pub frequency: BTreeMap<ColorCode, usize>,
}

impl EvalReport {
    fn empty(mask_count: usize) -> Self {
        Self {
            mask_count,
            accuracy_at_1: 0.0,
            all_correct_at_1: 0.0,
            distribution_at_1: 0.0,
            documents: 0,
            samples: 0,
            correct: 0,
            frequency: BTreeMap::new(),
        }
    }

    /// Combines two partial reports over disjoint documents.
    pub fn merge(mut self, other: &EvalReport) -> EvalReport {
        let all_correct = self.all_correct_at_1 * self.documents as f64 + other.all_correct_at_1 * other.documents as f64;
        self.documents += other.documents;
        self.samples += other.samples;
        self.correct += other.correct;
        for (c, n) in &other.frequency {
            *self.frequency.entry(*c).or_default() += n;
        }
        self.all_correct_at_1 = if self.documents == 0 { 0.0 } else { all_correct / self.documents as f64 };
        self.finish()
    }

    fn finish(mut self) -> Self {
        self.accuracy_at_1 = if self.samples == 0 { 0.0 } else { self.correct as f64 / self.samples as f64 };
        self.distribution_at_1 = distribution_at_1(&self.frequency);
        self
    }
}

/// Masks `mask_count` random eligible positions per qualifying document
/// (seeded) and scores the argmax color at each one.
pub fn accuracy_at_1<T: Scalar>(
    model: &MaskedColorModel<T>,
    docs: &[DocumentSample],
    mode: SequenceMode,
    mask_count: usize,
    seed: u64,
    provider: &EmbeddingProvider,
) -> Result<EvalReport, EvalError> {
    if mask_count == 0 || mask_count > mode.blocks() * MAX_PALETTE_LEN {
        return Err(EvalError::MaskCount(mask_count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for doc in docs {
        let seq = build_sequence(doc, mode);
        let eligible = seq.eligible();
        if eligible.len() < mask_count {
            continue;
        }
        let mut positions: Vec<usize> = sample(&mut rng, eligible.len(), mask_count).into_iter().map(|i| eligible[i]).collect();
        positions.sort_unstable();
        items.push((mask_exact(&seq, &positions)?, provider.embed_phrases(doc.phrases())?));
    }
    if items.is_empty() {
        return Err(EvalError::NoQualifying(mask_count));
    }
    let mut report = EvalReport::empty(mask_count);
    let mut all_correct = 0;
    for chunk in items.chunks(EVAL_BATCH) {
        let pairs: Vec<_> = chunk.iter().map(|(s, t)| (s, t)).collect();
        let batch = Batch::new(&pairs)?;
        let rows = batch.labelled_rows();
        let logits = model.forward_rows(&batch, &rows)?;
        let mut doc_ok = vec![true; chunk.len()];
        for (r, &row) in rows.iter().enumerate() {
            let truth = batch.labels[row].and_then(token_color).expect("masked color label");
            let best = code(ranked(&color_distribution(logits.row(r)))[0]);
            report.samples += 1;
            if best == truth {
                report.correct += 1;
                *report.frequency.entry(truth).or_default() += 1;
            } else {
                doc_ok[row / batch.seq_len] = false;
            }
        }
        all_correct += doc_ok.iter().filter(|ok| **ok).count();
    }
    report.documents = items.len();
    report.all_correct_at_1 = all_correct as f64 / items.len() as f64;
    Ok(report.finish())
}

/// Shannon entropy in bits of the empirical distribution behind `counts`.
/// An empty table has entropy 0.
pub fn distribution_at_1<K>(counts: &BTreeMap<K, usize>) -> f64 {
    let total: usize = counts.values().sum();
    if total == 0 {
        tracing::warn!("entropy of an empty frequency table taken as 0");
        return 0.0;
    }
    let h = -counts
        .values()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Mean of the ten pairwise Lab distances within a five-color palette.
pub fn diversity(palette: &[ColorCode]) -> Result<f64, EvalError> {
    if palette.len() != MAX_PALETTE_LEN {
        return Err(EvalError::DiversityLength(palette.len()));
    }
    let mut total = 0.0;
    for i in 0..palette.len() {
        for j in i + 1..palette.len() {
            total += lab_distance(palette[i], palette[j]);
        }
    }
    Ok(total / 10.0)
}

/// Symmetric mean closest-color distance between two palettes.
pub fn palette_similarity(p: &[ColorCode], q: &[ColorCode]) -> Result<f64, EvalError> {
    if p.is_empty() || q.is_empty() {
        return Err(EvalError::EmptyPalette);
    }
    let closest = |c: ColorCode, other: &[ColorCode]| {
        other.iter().map(|&o| lab_distance(c, o)).fold(f64::INFINITY, f64::min)
    };
    let sum: f64 = p.iter().map(|&c| closest(c, q)).sum::<f64>() + q.iter().map(|&c| closest(c, p)).sum::<f64>();
    Ok(sum / (p.len() + q.len()) as f64)
}

/// `code,hex,count` rows for every correctly predicted code.
pub fn write_frequency_csv<W: Write>(report: &EvalReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "code,hex,count")?;
    for (c, n) in &report.frequency {
        writeln!(out, "{},{},{}", c.get(), code_to_hex(*c), n)?;
    }
    out.flush()
}

pub fn export_frequency_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let file = std::fs::File::create(path)?;
    write_frequency_csv(report, std::io::BufWriter::new(file))?;
    Ok(())
}
