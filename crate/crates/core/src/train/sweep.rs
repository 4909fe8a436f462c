use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainError};
use crate::corpus::DocumentSample;
use crate::eval::accuracy_at_1;
use crate::model::ModelConfig;
use crate::text_embed::EmbeddingProvider;

/// Accuracy@1 with 1, 2 and 3 masked colors for one masking rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub masking_rate: f64,
    pub accuracy: [f64; 3],
}

/// Trains one model per masking rate and scores each on `val_docs`.
pub fn masking_sweep(
    train_docs: &[DocumentSample],
    val_docs: &[DocumentSample],
    rates: &[f64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    provider: &EmbeddingProvider,
) -> Result<Vec<SweepRow>, TrainError> {
    if rates.is_empty() {
        return Err(TrainError::Config("masking sweep needs at least one rate".into()));
    }
    rates
        .iter()
        .map(|&rate| {
            let cfg = TrainConfig { masking_rate: rate, ..cfg.clone() };
            let model = train(train_docs, val_docs, model_cfg, &cfg, provider)?.checkpoint.model;
            let mut accuracy = [0.0; 3];
            for (i, a) in accuracy.iter_mut().enumerate() {
                *a = accuracy_at_1(&model, val_docs, cfg.mode, i + 1, cfg.seed, provider)?.accuracy_at_1;
            }
            Ok(SweepRow { masking_rate: rate, accuracy })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;

    #[test]
    fn table_shape() {
        let docs = synth_corpus(8, 3).unwrap();
        let model = ModelConfig { width: 8, self_layers: 1, self_heads: 1, text_dim: 8, ..ModelConfig::default() };
        let cfg = TrainConfig { max_epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let p = EmbeddingProvider::hash(8);
        let rows = masking_sweep(&docs, &docs, &[0.15, 0.4], &model, &cfg, &p).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.accuracy.iter().all(|a| (0.0..=1.0).contains(a))));
        assert!(matches!(masking_sweep(&docs, &docs, &[], &model, &cfg, &p), Err(TrainError::Config(_))));
    }
}
