//! Synthetic georeferenced fixtures with waste markers planted in known
//! tiles, plus a per-tile diff of predictions against the planted truth.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crs::Crs;
use crate::error::{Error, Result};
use crate::evalsuite::ConfusionCounts;
use crate::geogrid::TileId;
use crate::geom::Affine;
use crate::raster::{write_geotiff, RasterData, RasterMeta, WriteOptions};
use crate::records::{write_predictions_csv, Class, PredictionRow, TileKey};
use crate::scalar::Scalar;
use crate::tiles::TENSOR_SIZE;

/// Marker blocks cover about this many tensor pixels per side after resize.
const MARKER_TENSOR_PX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub color: [u8; 3],
    /// Block side in source pixels; `None` scales it with the tile size.
    pub block_px: Option<u32>,
    /// Lattice step as a multiple of the block side.
    pub step_blocks: u32,
}

impl Default for MarkerSpec {
    fn default() -> Self {
        MarkerSpec {
            color: [255, 0, 0],
            block_px: None,
            step_blocks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantingPlan {
    pub rows: u32,
    pub cols: u32,
    pub planted: BTreeSet<TileId>,
    pub marker: MarkerSpec,
    pub seed: u64,
    pub gsd_m: f64,
    pub tile_size_m: f64,
    pub region_id: String,
    pub crs: Crs,
    /// Upper-left corner of the raster.
    pub origin: (f64, f64),
}

impl PlantingPlan {
    pub fn new(rows: u32, cols: u32, gsd_m: f64, seed: u64) -> Self {
        PlantingPlan {
            rows,
            cols,
            planted: BTreeSet::new(),
            marker: MarkerSpec::default(),
            seed,
            gsd_m,
            tile_size_m: 5.0,
            region_id: "synthetic".into(),
            crs: Crs::Utm { zone: 37, south: true },
            origin: (500_000.0, 9_300_000.0),
        }
    }

    /// Plants `count` tiles chosen uniformly with the plan seed.
    pub fn plant_random(mut self, count: usize) -> Result<Self> {
        let n = self.n_tiles();
        if count > n {
            return Err(Error::Config(format!("cannot plant {count} tiles in a {n}-tile grid")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x706c_616e_7473);
        self.planted = rand::seq::index::sample(&mut rng, n, count)
            .into_iter()
            .map(|i| TileId::new((i / self.cols as usize) as u32, (i % self.cols as usize) as u32))
            .collect();
        Ok(self)
    }

    pub fn with_planted(mut self, planted: impl IntoIterator<Item = TileId>) -> Self {
        self.planted = planted.into_iter().collect();
        self
    }

    pub fn n_tiles(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("fixture grid needs at least one row and column".into()));
        }
        if !(self.gsd_m > 0.0 && self.tile_size_m > 0.0) {
            return Err(Error::Config("gsd and tile size must be positive".into()));
        }
        let px = self.tile_size_m / self.gsd_m;
        if (px - px.round()).abs() > 1e-9 || px.round() < 2.0 {
            return Err(Error::Config(format!(
                "tile size {} m is not a whole number (>= 2) of {} m pixels",
                self.tile_size_m, self.gsd_m
            )));
        }
        if !self.crs.is_metric() {
            return Err(Error::Config(format!("fixture CRS {} is not metric", self.crs)));
        }
        if let Some(t) = self.planted.iter().find(|t| t.row >= self.rows || t.col >= self.cols) {
            return Err(Error::Config(format!("planted tile {t} outside the {}x{} grid", self.rows, self.cols)));
        }
        let (b, step) = self.marker_geometry();
        if b == 0 || step < b || 2 * b >= self.tile_px() {
            return Err(Error::Config("marker block does not fit the tile".into()));
        }
        Ok(())
    }

    pub fn tile_px(&self) -> u32 {
        (self.tile_size_m / self.gsd_m).round() as u32
    }

    /// Block side and lattice step in source pixels.
    pub fn marker_geometry(&self) -> (u32, u32) {
        let b = self.marker.block_px.unwrap_or_else(|| {
            (MARKER_TENSOR_PX * self.tile_px() as usize).div_ceil(TENSOR_SIZE).max(1) as u32
        });
        (b, b * self.marker.step_blocks)
    }

    /// Block origins within a tile, one block from each edge.
    fn marker_offsets(&self) -> Vec<u32> {
        let (b, step) = self.marker_geometry();
        let n = self.tile_px();
        (0..).map(|k| b + k * step).take_while(|o| o + b <= n - b).collect()
    }

    /// Fraction of a planted tile's source pixels that are markers.
    pub fn marker_density(&self) -> f64 {
        let (b, _) = self.marker_geometry();
        let k = self.marker_offsets().len() as f64;
        (k * f64::from(b)).powi(2) / f64::from(self.tile_px()).powi(2)
    }

    pub fn expected_oddmswc<T: Scalar>(&self) -> T {
        T::from_count(100 * self.planted.len()) / T::from_count(self.n_tiles())
    }

    pub fn meta(&self) -> Result<RasterMeta<f64>> {
        let px = self.tile_px();
        RasterMeta::new(
            self.cols * px,
            self.rows * px,
            Affine::north_up(self.origin.0, self.origin.1, self.gsd_m, self.gsd_m),
            self.crs,
            3,
            8,
        )
    }

    /// Every tile in row-major order with its planted class.
    pub fn truth(&self) -> Vec<PredictionRow> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| TileId::new(r, c)))
            .map(|id| PredictionRow {
                key: TileKey::new(&self.region_id, id),
                class: if self.planted.contains(&id) { Class::Waste } else { Class::Background },
                confidence: 1.0,
            })
            .collect()
    }

    /// Pixel-interleaved RGB bytes. Background is seeded noise well clear of
    /// the marker colour.
    pub fn render(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let tp = self.tile_px() as usize;
        let (w, h) = (self.cols as usize * tp, self.rows as usize * tp);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            data.push(rng.random_range(40u8..140));
            data.push(rng.random_range(80u8..180));
            data.push(rng.random_range(40u8..140));
        }
        let (b, _) = self.marker_geometry();
        let offsets = self.marker_offsets();
        for t in &self.planted {
            let (r0, c0) = (t.row as usize * tp, t.col as usize * tp);
            for &oy in &offsets {
                for &ox in &offsets {
                    for y in 0..b as usize {
                        for x in 0..b as usize {
                            let i = ((r0 + oy as usize + y) * w + c0 + ox as usize + x) * 3;
                            data[i..i + 3].copy_from_slice(&self.marker.color);
                        }
                    }
                }
            }
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub raster: PathBuf,
    pub truth: PathBuf,
    pub plan: PathBuf,
}

/// Writes `fixture.tif`, `truth.csv` and `plan.json` into `out`.
pub fn make_fixture(plan: &PlantingPlan, out: impl AsRef<Path>) -> Result<Fixture> {
    let out = out.as_ref();
    let data = plan.render()?;
    let meta = plan.meta()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fx = Fixture {
        raster: out.join("fixture.tif"),
        truth: out.join("truth.csv"),
        plan: out.join("plan.json"),
    };
    write_geotiff(&fx.raster, &meta, &RasterData::U8(data), WriteOptions::default())?;
    write_predictions_csv(&fx.truth, &plan.truth())?;
    let text = serde_json::to_string_pretty(plan).expect("plan serializes");
    std::fs::write(&fx.plan, text + "\n").map_err(|e| Error::io(&fx.plan, e))?;
    Ok(fx)
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<PlantingPlan> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), "plan", e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileDiff {
    pub key: TileKey,
    pub expected: Class,
    pub predicted: Class,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub exact: bool,
    pub confusion: ConfusionCounts,
    pub mismatched: Vec<TileDiff>,
    /// Truth tiles without a prediction.
    pub missing: Vec<TileKey>,
}

/// Compares predictions with the planted truth, tile by tile.
pub fn verify_pipeline(truth: &[PredictionRow], predictions: &[PredictionRow]) -> DiffReport {
    let by_key: HashMap<&TileKey, Class> = predictions.iter().map(|p| (&p.key, p.class)).collect();
    let outcomes: Vec<(usize, Option<Class>)> = truth
        .par_iter()
        .enumerate()
        .map(|(i, t)| (i, by_key.get(&t.key).copied()))
        .collect();
    let mut report = DiffReport {
        exact: true,
        confusion: ConfusionCounts::default(),
        mismatched: Vec::new(),
        missing: Vec::new(),
    };
    for (i, got) in outcomes {
        let t = &truth[i];
        match got {
            None => report.missing.push(t.key.clone()),
            Some(p) => {
                report.confusion.add(p, t.class);
                if p != t.class {
                    report.mismatched.push(TileDiff {
                        key: t.key.clone(),
                        expected: t.class,
                        predicted: p,
                    });
                }
            }
        }
    }
    report.exact = report.mismatched.is_empty() && report.missing.is_empty();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{make_grid, GridSpec};
    use crate::infer::reference::ReferenceClassifier;
    use crate::infer::{run_inference, InferOptions};
    use crate::raster::RasterDataset;

    #[test]
    fn plan_arithmetic() {
        let p = PlantingPlan::new(10, 10, 0.05, 7).plant_random(13).unwrap();
        assert_eq!(p.planted.len(), 13);
        assert_eq!(p.tile_px(), 100);
        assert_eq!(p.meta().unwrap().width_px, 1000);
        assert_eq!(p.truth().iter().filter(|r| r.class.is_waste()).count(), 13);
        assert_eq!(p.expected_oddmswc::<f64>(), 13.0);
        assert!(p.marker_density() >= 0.08, "{}", p.marker_density());
        let q = PlantingPlan::new(8, 8, 0.05, 1).plant_random(7).unwrap();
        assert_eq!(q.expected_oddmswc::<f64>(), 10.9375);
        assert!(PlantingPlan::new(2, 2, 0.03, 1).validate().is_err());
        assert!(PlantingPlan::new(2, 2, 0.05, 1).plant_random(5).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let p = PlantingPlan::new(3, 3, 0.1, 9).plant_random(2).unwrap();
        assert_eq!(p.render().unwrap(), p.render().unwrap());
        let other = PlantingPlan { seed: 10, ..p.clone() };
        assert_ne!(p.render().unwrap(), other.render().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let a = make_fixture(&p, dir.path().join("a")).unwrap();
        let b = make_fixture(&p, dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(&a.raster).unwrap(), std::fs::read(&b.raster).unwrap());
        assert_eq!(read_plan(&a.plan).unwrap(), p);
    }

    #[test]
    fn reference_closure_and_diffs() {
        let p = PlantingPlan::new(10, 10, 0.05, 7).plant_random(13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fx = make_fixture(&p, dir.path()).unwrap();
        let ds = RasterDataset::open(&fx.raster).unwrap();
        let grid = make_grid::<f64>(ds.meta(), &GridSpec::default()).unwrap();
        assert_eq!(grid.len(), 100);
        let out = run_inference(&ds, &grid.tiles, &ReferenceClassifier::default(), &InferOptions::default()).unwrap();
        let rows: Vec<_> = out.predictions.iter().map(|x| x.to_row(&p.region_id)).collect();
        let truth = p.truth();
        let r = verify_pipeline(&truth, &rows);
        assert!(r.exact, "{:?}", r.mismatched);
        assert_eq!((r.confusion.tp, r.confusion.tn), (13, 87));

        let mut flipped = rows.clone();
        flipped[5].class = if flipped[5].class.is_waste() { Class::Background } else { Class::Waste };
        let r = verify_pipeline(&truth, &flipped);
        assert_eq!(r.mismatched.len(), 1);
        assert!(!r.exact);

        let r = verify_pipeline(&truth, &[]);
        assert_eq!(r.missing.len(), 100);
        assert_eq!(r.confusion.total(), 0);
    }

    #[test]
    fn empty_plan_is_all_background() {
        let p = PlantingPlan::new(4, 4, 0.5, 1);
        assert!(p.truth().iter().all(|r| r.class == Class::Background));
    }
}
