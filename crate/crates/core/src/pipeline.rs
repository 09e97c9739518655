//! Scoring whole manifests: batched ingestion feeding inference-mode
//! forward passes, regrouped per volume.

use thiserror::Error;

use crate::diagnosis::ScoredVolume;
use crate::ingest::{self, CtVolume, IngestError};
use crate::tensor::Mode;
use crate::xception::{ModelError, ModelGraph};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Class-1 (Non-COVID) probability of every slice, grouped by volume in
/// manifest order.
pub fn score_volumes(
    model: &ModelGraph,
    volumes: &[CtVolume],
    batch_size: usize,
) -> Result<Vec<ScoredVolume>, ScoreError> {
    let mut out: Vec<ScoredVolume> = volumes
        .iter()
        .map(|v| ScoredVolume {
            volume_id: v.volume_id.clone(),
            probabilities: Vec::with_capacity(v.slice_paths.len()),
            truth: v.label,
        })
        .collect();
    let mut cursor = 0usize;
    for batch in ingest::batch_iter(volumes, batch_size, model.input_side())? {
        let batch = batch?;
        let probs = model.forward(&batch.tensor, Mode::Infer, 0)?;
        for ((vid, _), p) in batch.provenance.iter().zip(probs) {
            while out[cursor].volume_id != *vid || out[cursor].probabilities.len() == volumes[cursor].slice_paths.len() {
                cursor += 1;
            }
            out[cursor].probabilities.push(p);
        }
    }
    Ok(out)
}
