//! Mini-batch training with dynamic masking, validation and early stopping.
//!
//! Every epoch draws fresh mask plans for the training split from an RNG
//! stream keyed by `(seed, epoch)`. The validation split uses one fixed set
//! of plans in which every selected position is `[MASK]`ed, so validation
//! loss and accuracy are comparable across epochs.

mod checkpoint;
mod sweep;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
    EmbeddingInfo, FORMAT_VERSION, MAGIC,
};
pub use sweep::{masking_sweep, SweepRow};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    apply_mask, apply_mask_with, build_sequence, CorpusError, DocumentSample, MaskParams, SequenceMode, TokenSequence,
};
use crate::eval::EvalError;
use crate::model::{color_distribution, ranked, Batch, MaskedColorModel, ModelConfig};
use crate::nn::functional::log_sum_exp;
use crate::nn::{Adam, Graph, NnError, Scalar};
use crate::text_embed::{EmbedError, EmbeddingProvider, TextContext};

const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub masking_rate: f64,
    pub masked_token_rate: f64,
    pub random_token_rate: f64,
    pub loss_on_kept: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: SequenceMode,
    /// Stop as soon as validation accuracy@1 reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            masking_rate: 0.4,
            masked_token_rate: 0.5,
            random_token_rate: 0.0,
            loss_on_kept: true,
            batch_size: 32,
            lr: 1e-4,
            max_epochs: 300,
            patience: 30,
            seed: 0,
            mode: SequenceMode::Crello,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn mask_params(&self) -> MaskParams {
        MaskParams {
            masking_rate: self.masking_rate,
            masked_token_rate: self.masked_token_rate,
            random_token_rate: self.random_token_rate,
            loss_on_kept: self.loss_on_kept,
        }
    }

    fn validation_mask(&self) -> MaskParams {
        MaskParams { masked_token_rate: 1.0, random_token_rate: 0.0, ..self.mask_params() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.mask_params().validate()?;
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size, patience and max_epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("document {id}: {source}")]
    Embedding { id: String, source: EmbedError },
    #[error("model config expects {expected} tokens per sequence but mode {mode:?} produces {found}")]
    SequenceLength { mode: SequenceMode, expected: usize, found: usize },
    #[error("loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TargetAccuracy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Validation loss and accuracy@1 over fixed masked sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub accuracy: f64,
    pub positions: usize,
}

/// Token sequences and phrase embeddings for a split.
pub fn prepare(
    docs: &[DocumentSample],
    mode: SequenceMode,
    provider: &EmbeddingProvider,
) -> Result<Vec<(TokenSequence, TextContext)>, TrainError> {
    docs.iter()
        .map(|doc| {
            let text = provider
                .embed_phrases(doc.phrases())
                .map_err(|source| TrainError::Embedding { id: doc.id.clone(), source })?;
            Ok((build_sequence(doc, mode), text))
        })
        .collect()
}

/// Seeded validation masks: every selected position becomes `[MASK]`.
pub fn validation_set(
    items: &[(TokenSequence, TextContext)],
    cfg: &TrainConfig,
) -> Result<Vec<(TokenSequence, TextContext)>, TrainError> {
    let params = cfg.validation_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(VALIDATION_STREAM);
    items
        .iter()
        .map(|(seq, text)| Ok((apply_mask_with(seq, &params, &mut rng)?.0, text.clone())))
        .collect()
}

/// Eval-mode loss (full-vocabulary cross-entropy) and argmax accuracy over
/// the labelled positions of already masked sequences.
pub fn validate<T: Scalar>(
    model: &MaskedColorModel<T>,
    items: &[(TokenSequence, TextContext)],
    batch_size: usize,
) -> Result<Validation, TrainError> {
    let (mut loss, mut correct, mut positions) = (0.0, 0usize, 0usize);
    for chunk in items.chunks(batch_size.max(1)) {
        let pairs: Vec<_> = chunk.iter().map(|(s, t)| (s, t)).collect();
        let batch = Batch::new(&pairs)?;
        let rows = batch.labelled_rows();
        if rows.is_empty() {
            continue;
        }
        let logits = model.forward_rows(&batch, &rows)?;
        for (r, &row) in rows.iter().enumerate() {
            let label = batch.labels[row].expect("labelled row");
            let values: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            loss += log_sum_exp(&values) - values[label];
            let best = ranked(&color_distribution(logits.row(r)))[0] + crate::corpus::NUM_SPECIAL;
            correct += usize::from(best == label);
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(TrainError::Model(NnError::NoTargets));
    }
    Ok(Validation { loss: loss / positions as f64, accuracy: correct as f64 / positions as f64, positions })
}

/// Mean training loss of one epoch. Updates `model` and `adam` in place.
pub fn train_epoch(
    model: &mut MaskedColorModel<f32>,
    adam: &mut Adam<f32>,
    items: &[(TokenSequence, TextContext)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let params = cfg.mask_params();
    let (mut total, mut batches) = (0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let masked = chunk
            .iter()
            .map(|&i| Ok((apply_mask_with(&items[i].0, &params, &mut rng)?.0, &items[i].1)))
            .collect::<Result<Vec<_>, CorpusError>>()?;
        let pairs: Vec<_> = masked.iter().map(|(s, t)| (s, *t)).collect();
        let batch = Batch::new(&pairs)?;
        let mut g = Graph::new();
        let loss = match model.loss(&mut g, &batch, Some(&mut rng)) {
            Err(NnError::NoTargets) => continue,
            other => other?,
        };
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        g.backward(loss)?;
        let grads = g.param_grads(model.params())?;
        adam.step(model.params_mut(), &grads)?;
        total += value;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Trains from scratch and returns the best checkpoint by validation loss.
pub fn train(
    train_docs: &[DocumentSample],
    val_docs: &[DocumentSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    provider: &EmbeddingProvider,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_docs.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if model_cfg.max_len < cfg.mode.len() {
        return Err(TrainError::SequenceLength { mode: cfg.mode, expected: model_cfg.max_len, found: cfg.mode.len() });
    }
    if provider.dim() != model_cfg.text_dim {
        return Err(TrainError::Config(format!(
            "provider width {} differs from model text width {}",
            provider.dim(),
            model_cfg.text_dim
        )));
    }
    let train_items = prepare(train_docs, cfg.mode, provider)?;
    let val_items = validation_set(&prepare(val_docs, cfg.mode, provider)?, cfg)?;

    let mut model = MaskedColorModel::<f32>::init(model_cfg.clone())?;
    let mut adam = Adam::new(model.params(), cfg.lr);
    let embedding = EmbeddingInfo::of(provider);

    let first = validate(&model, &val_items, cfg.batch_size)?;
    let mut log = vec![EpochLog { epoch: 0, train_loss: None, val_loss: first.loss, val_accuracy: first.accuracy }];
    let snapshot = |model: &MaskedColorModel<f32>, adam: &Adam<f32>, epoch: usize, best: f64| Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        optimizer: adam.clone(),
        embedding: embedding.clone(),
        epoch,
        best_val_loss: best,
    };
    let mut best = snapshot(&model, &adam, 0, first.loss);
    let mut since_best = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(&mut model, &mut adam, &train_items, cfg, epoch)?;
        let val = validate(&model, &val_items, cfg.batch_size)?;
        if !val.loss.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let entry = EpochLog { epoch, train_loss: Some(train_loss), val_loss: val.loss, val_accuracy: val.accuracy };
        tracing::info!(epoch, train_loss, val_loss = val.loss, val_accuracy = val.accuracy, "epoch");
        log.push(entry);
        if val.loss < best.best_val_loss {
            best = snapshot(&model, &adam, epoch, val.loss);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_accuracy.is_some_and(|t| val.accuracy >= t) {
            // The target is reached by the current weights, which may not be
            // the lowest-loss ones.
            best = snapshot(&model, &adam, epoch, best.best_val_loss.min(val.loss));
            stop = StopReason::TargetAccuracy;
            break;
        }
        if since_best >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome { checkpoint: best, log, stop })
}

/// Training loss of the untrained model on one masked draw of `docs`.
pub fn initial_loss(
    docs: &[DocumentSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    provider: &EmbeddingProvider,
) -> Result<f64, TrainError> {
    let model = MaskedColorModel::<f64>::init(model_cfg.clone())?;
    let items = prepare(docs, cfg.mode, provider)?;
    let masked = items
        .iter()
        .enumerate()
        .map(|(i, (s, t))| Ok((apply_mask(s, &cfg.mask_params(), cfg.seed.wrapping_add(i as u64))?.0, t.clone())))
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(validate(&model, &masked, cfg.batch_size)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;

    fn tiny_model() -> ModelConfig {
        ModelConfig { width: 16, self_layers: 1, self_heads: 2, text_dim: 16, dropout: 0.0, ..ModelConfig::default() }
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { masking_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { masked_token_rate: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn empty_splits_are_errors() {
        let docs = synth_corpus(4, 1).unwrap();
        let p = EmbeddingProvider::hash(16);
        let cfg = TrainConfig::default();
        assert!(matches!(train(&[], &docs, &tiny_model(), &cfg, &p), Err(TrainError::EmptySplit("training"))));
        assert!(matches!(train(&docs, &[], &tiny_model(), &cfg, &p), Err(TrainError::EmptySplit("validation"))));
    }

    #[test]
    fn patience_one_returns_earlier_epoch() {
        let docs = synth_corpus(16, 2).unwrap();
        let p = EmbeddingProvider::hash(16);
        // A huge learning rate makes validation loss rise right away.
        let cfg = TrainConfig { lr: 0.5, patience: 1, max_epochs: 20, batch_size: 8, ..TrainConfig::default() };
        let out = train(&docs, &docs, &tiny_model(), &cfg, &p).unwrap();
        assert_eq!(out.stop, StopReason::Patience);
        let best = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.checkpoint.best_val_loss, best);
        assert_eq!(out.log.last().unwrap().epoch, out.checkpoint.epoch + 1);
    }
}
