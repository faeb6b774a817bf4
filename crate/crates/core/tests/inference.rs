use std::sync::atomic::{AtomicUsize, Ordering};

use dumpscan_core::error::Error;
use dumpscan_core::geogrid;
use dumpscan_core::infer::{run_inference, ClassifierBackend, InferOptions, ReferenceClassifier};
use dumpscan_core::raster::RasterDataset;
use dumpscan_core::synthbench::{make_fixture, verify_pipeline, PlantingPlan};
use dumpscan_core::tiles::TileTensor;
use dumpscan_core::{Grid, GridSpec, Result};

/// Reference classifier that fails on one batch call.
struct Flaky {
    inner: ReferenceClassifier,
    calls: AtomicUsize,
    fail_on: usize,
}

impl ClassifierBackend for Flaky {
    fn predict_batch(&self, batch: &[TileTensor]) -> Result<Vec<[f64; 2]>> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == self.fail_on {
            return Err(Error::Validation("device lost".into()));
        }
        self.inner.predict_batch(batch)
    }

    // Same id as the wrapped model so a checkpoint carries over.
    fn id(&self) -> String {
        self.inner.id()
    }
}

fn fixture(dir: &std::path::Path) -> (PlantingPlan, RasterDataset, Grid) {
    let plan = PlantingPlan::new(12, 12, 0.1, 11).plant_random(20).unwrap();
    let fx = make_fixture(&plan, dir.join("fx")).unwrap();
    let raster = RasterDataset::open(&fx.raster).unwrap();
    let grid = geogrid::make_grid(raster.meta(), &GridSpec::default()).unwrap();
    (plan, raster, grid)
}

#[test]
fn checkpoint_resume_after_backend_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (plan, raster, grid) = fixture(dir.path());
    let cp = dir.path().join("infer.checkpoint.json");
    let opts = InferOptions {
        batch_size: 8,
        workers: Some(2),
        checkpoint: Some(cp.clone()),
        checkpoint_every: 1,
    };
    let reference = ReferenceClassifier::default();
    let clean = run_inference(&raster, &grid.tiles, &reference, &InferOptions::default()).unwrap();

    let flaky = Flaky {
        inner: reference.clone(),
        calls: AtomicUsize::new(0),
        fail_on: 5,
    };
    let err = run_inference(&raster, &grid.tiles, &flaky, &opts).unwrap_err();
    match &err {
        Error::Backend { first, last, message } => {
            // Sixth batch of eight: tiles 40..=47 in row-major order.
            assert_eq!((first.row, first.col), (3, 4));
            assert_eq!((last.row, last.col), (3, 11));
            assert!(message.contains("device lost"));
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(cp.is_file());

    let resumed = run_inference(&raster, &grid.tiles, &flaky, &opts).unwrap();
    assert_eq!(resumed.resumed_from, Some(40));
    assert_eq!(resumed.predictions, clean.predictions);
    assert!(!cp.exists());

    let rows: Vec<_> = resumed.predictions.iter().map(|p| p.to_row(&plan.region_id)).collect();
    assert!(verify_pipeline(&plan.truth(), &rows).exact);
}

#[test]
fn checkpoint_from_other_inputs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, raster, grid) = fixture(dir.path());
    let cp = dir.path().join("cp.json");
    let opts = InferOptions {
        batch_size: 4,
        workers: Some(1),
        checkpoint: Some(cp.clone()),
        checkpoint_every: 1,
    };
    let flaky = Flaky {
        inner: ReferenceClassifier::default(),
        calls: AtomicUsize::new(0),
        fail_on: 2,
    };
    run_inference(&raster, &grid.tiles, &flaky, &opts).unwrap_err();
    // A different tile list changes the fingerprint.
    let err = run_inference(&raster, &grid.tiles[1..], &ReferenceClassifier::default(), &opts).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn batch_size_and_workers_do_not_change_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (_, raster, grid) = fixture(dir.path());
    let backend = ReferenceClassifier::default();
    let run = |batch_size, workers| {
        let opts = InferOptions {
            batch_size,
            workers: Some(workers),
            ..Default::default()
        };
        run_inference(&raster, &grid.tiles, &backend, &opts).unwrap()
    };
    let base = run(1, 1);
    assert_eq!(base.predictions.len(), 144);
    for (b, w) in [(64, 1), (64, 3), (7, 2)] {
        assert_eq!(run(b, w), base, "batch {b}, workers {w}");
    }
}
