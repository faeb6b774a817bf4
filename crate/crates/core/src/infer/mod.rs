//! Tile classification through a pluggable backend, with resumable runs.

pub mod reference;
#[cfg(feature = "onnx")]
pub mod onnx;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geogrid::{TileId, TileRecord};
use crate::raster::RasterDataset;
use crate::records::{Class, PredictionRow, TileKey};
use crate::scalar::{shifted_mean, Scalar};
use crate::tiles::{extract_batch, ExtractOptions, TileTensor, TENSOR_SIZE};

pub use reference::{ReferenceClassifier, ReferenceParams};

/// Tolerance on `p_background + p_waste == 1`.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Classifier contract: `[p_background, p_waste]` for each input tensor,
/// deterministic for identical inputs.
pub trait ClassifierBackend: Send + Sync {
    fn predict_batch(&self, batch: &[TileTensor]) -> Result<Vec<[f64; 2]>>;

    /// Identifies the model and its parameters (used in checkpoint fingerprints).
    fn id(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tile_id: TileId,
    pub class: Class,
    /// Probability of the predicted class, in [0.5, 1].
    pub confidence: f64,
    pub p_waste: f64,
}

impl Prediction {
    pub fn from_probs(tile_id: TileId, probs: [f64; 2]) -> Self {
        let (class, confidence) = decide(probs);
        Prediction {
            tile_id,
            class,
            confidence,
            p_waste: probs[1],
        }
    }

    pub fn to_row(&self, region_id: &str) -> PredictionRow {
        PredictionRow {
            key: TileKey::new(region_id, self.tile_id),
            class: self.class,
            confidence: self.confidence,
        }
    }
}

/// Binary argmax; an exact tie goes to background.
pub fn decide(probs: [f64; 2]) -> (Class, f64) {
    if probs[1] > probs[0] {
        (Class::Waste, probs[1])
    } else {
        (Class::Background, probs[0])
    }
}

fn check_probs(p: [f64; 2]) -> std::result::Result<(), String> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || ((p[0] + p[1]) - 1.0).abs() > PROB_SUM_TOL {
        return Err(format!("invalid probability pair {p:?}"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub batch_size: usize,
    pub workers: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint after this many batches.
    pub checkpoint_every: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            batch_size: 64,
            workers: None,
            checkpoint: None,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// In tile order.
    pub predictions: Vec<Prediction>,
    /// Tiles without valid pixels, in tile order.
    pub skipped: Vec<TileId>,
    /// Tile index the run resumed from, when a checkpoint was used.
    pub resumed_from: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    next_tile: usize,
    predictions: Vec<Prediction>,
    skipped: Vec<TileId>,
}

fn fingerprint<T: Scalar>(raster: &RasterDataset, tiles: &[TileRecord<T>], backend: &dyn ClassifierBackend) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(raster.meta()).expect("serializable"));
    h.update(backend.id().as_bytes());
    for t in tiles {
        let w = t.pixel_window;
        for v in [t.tile_id.row, t.tile_id.col, w.row_off, w.col_off, w.height, w.width] {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    serde_json::to_writer(&mut tmp, cp).map_err(|e| Error::io(path, e.into()))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn load_checkpoint(path: &Path, fp: &str) -> Result<Option<Checkpoint>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let cp: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), "checkpoint", e))?;
    if cp.fingerprint != fp {
        return Err(Error::Config(format!(
            "checkpoint {} belongs to a different raster, grid or model",
            path.display()
        )));
    }
    Ok(Some(cp))
}

type Batch = Result<(Vec<TileTensor>, Vec<TileId>)>;

/// Classifies every tile with valid pixels. Extraction runs on a worker pool
/// feeding a bounded queue; the backend consumes batches in tile order.
///
/// On backend failure the predictions made so far are checkpointed (when a
/// checkpoint path is set) and the error names the failing batch's tiles.
/// A later call with the same inputs resumes after the last completed batch.
pub fn run_inference<T: Scalar>(
    raster: &RasterDataset,
    tiles: &[TileRecord<T>],
    backend: &dyn ClassifierBackend,
    opts: &InferOptions,
) -> Result<InferenceOutput> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let fp = fingerprint(raster, tiles, backend);
    let mut start = 0;
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    let mut resumed_from = None;
    if let Some(path) = &opts.checkpoint {
        if let Some(cp) = load_checkpoint(path, &fp)? {
            tracing::info!(next_tile = cp.next_tile, "resuming from checkpoint");
            start = cp.next_tile.min(tiles.len());
            predictions = cp.predictions;
            skipped = cp.skipped;
            resumed_from = Some(start);
        }
    }
    let index: HashMap<TileId, usize> = tiles.iter().enumerate().map(|(i, t)| (t.tile_id, i)).collect();
    let remaining = &tiles[start..];
    let extract = ExtractOptions {
        batch_size: opts.batch_size,
        tensor_size: TENSOR_SIZE,
        workers: opts.workers,
    };
    let queue = opts.workers.unwrap_or_else(rayon::current_num_threads).max(1);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Batch>(queue);
        scope.spawn(move || {
            let mut stream = match extract_batch(raster, remaining, extract) {
                Ok(s) => s,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            let mut sent_skips = 0;
            while let Some(item) = stream.next() {
                let new_skips = stream.skipped()[sent_skips..].to_vec();
                sent_skips = stream.skipped().len();
                if tx.send(item.map(|b| (b, new_skips))).is_err() {
                    return;
                }
            }
            let rest = stream.skipped()[sent_skips..].to_vec();
            let _ = tx.send(Ok((Vec::new(), rest)));
        });

        let mut pending_skips: Vec<TileId> = Vec::new();
        let mut next_tile = start;
        let mut batches_done = 0usize;
        let checkpoint = |next_tile: usize, predictions: &[Prediction], skipped: &[TileId], pending: &[TileId]| {
            if let Some(path) = &opts.checkpoint {
                let mut sk: Vec<TileId> = skipped.to_vec();
                sk.extend(pending.iter().filter(|id| index[id] < next_tile));
                write_checkpoint(
                    path,
                    &Checkpoint {
                        fingerprint: fp.clone(),
                        next_tile,
                        predictions: predictions.to_vec(),
                        skipped: sk,
                    },
                )
            } else {
                Ok(())
            }
        };
        for msg in rx {
            let (batch, new_skips) = msg?;
            pending_skips.extend(new_skips);
            if batch.is_empty() {
                continue;
            }
            let first = batch[0].tile_id;
            let last = batch[batch.len() - 1].tile_id;
            let fail = |message: String| Error::Backend { first, last, message };
            let result = backend
                .predict_batch(&batch)
                .map_err(|e| fail(e.to_string()))
                .and_then(|probs| {
                    if probs.len() != batch.len() {
                        return Err(fail(format!("{} outputs for {} tiles", probs.len(), batch.len())));
                    }
                    probs.iter().try_for_each(|p| check_probs(*p)).map_err(fail)?;
                    Ok(probs)
                });
            let probs = match result {
                Ok(p) => p,
                Err(e) => {
                    checkpoint(next_tile, &predictions, &skipped, &pending_skips)?;
                    return Err(e);
                }
            };
            predictions.extend(batch.iter().zip(probs).map(|(t, p)| Prediction::from_probs(t.tile_id, p)));
            next_tile = index[&last] + 1;
            let (done, later): (Vec<TileId>, Vec<TileId>) =
                pending_skips.drain(..).partition(|id| index[id] < next_tile);
            skipped.extend(done);
            pending_skips = later;
            batches_done += 1;
            if opts.checkpoint_every > 0 && batches_done % opts.checkpoint_every == 0 {
                checkpoint(next_tile, &predictions, &skipped, &[])?;
            }
        }
        skipped.extend(pending_skips);
        Ok(())
    })?;

    skipped.sort_by_key(|id| index[id]);
    if let Some(path) = &opts.checkpoint {
        match std::fs::remove_file(path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(InferenceOutput {
        predictions,
        skipped,
        resumed_from,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Present only when truth is supplied and the group is non-empty.
    pub correct: Option<GroupStats>,
    pub incorrect: Option<GroupStats>,
}

/// Confidence summary; with truth, split into correct and incorrect predictions.
pub fn confidence_stats(predictions: &[PredictionRow], truth: Option<&[PredictionRow]>) -> Result<ConfidenceStats> {
    if predictions.is_empty() {
        return Err(Error::Undefined("no predictions".into()));
    }
    let conf: Vec<f64> = predictions.iter().map(|p| p.confidence).collect();
    let mut sorted = conf.clone();
    sorted.sort_by(f64::total_cmp);
    let median = crate::scalar::percentile(&sorted, 50.0).expect("non-empty");
    let mean = shifted_mean(&conf).expect("non-empty");
    let (mut correct, mut incorrect) = (None, None);
    if let Some(truth) = truth {
        let by_key: HashMap<&TileKey, Class> = truth.iter().map(|t| (&t.key, t.class)).collect();
        let (mut ok, mut bad) = (Vec::new(), Vec::new());
        for p in predictions {
            if let Some(&c) = by_key.get(&p.key) {
                if c == p.class {
                    ok.push(p.confidence);
                } else {
                    bad.push(p.confidence);
                }
            }
        }
        if ok.is_empty() && bad.is_empty() {
            return Err(Error::Join("predictions and truth share no tiles".into()));
        }
        let group = |v: &[f64]| shifted_mean(v).map(|mean| GroupStats { n: v.len(), mean });
        correct = group(&ok);
        incorrect = group(&bad);
    }
    Ok(ConfidenceStats {
        n: predictions.len(),
        mean,
        median,
        correct,
        incorrect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(col: u32, class: Class, confidence: f64) -> PredictionRow {
        PredictionRow {
            key: TileKey::new("r", TileId::new(0, col)),
            class,
            confidence,
        }
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(decide([0.3, 0.7]), (Class::Waste, 0.7));
        assert_eq!(decide([0.5, 0.5]), (Class::Background, 0.5));
        assert!(check_probs([0.4, 0.5]).is_err());
        assert!(check_probs([0.4, 0.600001]).is_ok());
    }

    #[test]
    fn confidence_partition() {
        let preds = [row(0, Class::Waste, 0.9), row(1, Class::Waste, 0.7)];
        let truth = [row(0, Class::Waste, 1.0), row(1, Class::Background, 1.0)];
        let s = confidence_stats(&preds, Some(&truth)).unwrap();
        assert_eq!(s.correct.unwrap().mean, 0.9);
        assert_eq!(s.incorrect.unwrap().mean, 0.7);
        assert!((s.mean - 0.8).abs() < 1e-15);

        let all = [row(0, Class::Waste, 1.0), row(1, Class::Background, 1.0)];
        let s = confidence_stats(&all, Some(&all)).unwrap();
        assert_eq!(s.correct.unwrap().mean, 1.0);
        assert!(s.incorrect.is_none());

        let other = [PredictionRow {
            key: TileKey::new("x", TileId::new(9, 9)),
            class: Class::Waste,
            confidence: 1.0,
        }];
        assert!(matches!(confidence_stats(&all, Some(&other)), Err(Error::Join(_))));
    }
}
