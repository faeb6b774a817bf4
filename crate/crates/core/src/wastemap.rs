//! Per-region contamination score (share of analyzed tiles predicted as
//! waste, in percent), region ranking and map export.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geogrid::{Grid, TileId};
use crate::geojson::{FeatureWriter, PropValue};
use crate::records::{Class, PredictionRow};
use crate::scalar::Scalar;

pub const SUMMARY_HEADER: &str = "region_id,n_tiles,n_waste,oddmswc,rank";
/// Tiles with a smaller valid-pixel fraction are not counted as analyzed.
pub const DEFAULT_MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSummary<T> {
    pub region_id: String,
    pub n_tiles_analyzed: usize,
    pub n_waste: usize,
    /// `100 * n_waste / n_tiles_analyzed`.
    pub oddmswc: T,
    /// 1-based, assigned by [`rank_regions`].
    pub rank: Option<usize>,
}

/// One grid tile's outcome for scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileOutcome {
    /// `None` for skipped (no valid pixels) tiles.
    pub prediction: Option<Class>,
    pub valid_fraction: f64,
}

/// Scores one region. Skipped tiles and tiles below `min_valid_fraction`
/// are left out of the denominator.
pub fn oddmswc<T: Scalar>(
    region_id: &str,
    tiles: impl IntoIterator<Item = TileOutcome>,
    min_valid_fraction: f64,
) -> Result<RegionSummary<T>> {
    let (mut n, mut waste) = (0usize, 0usize);
    for t in tiles {
        if let Some(c) = t.prediction {
            if t.valid_fraction >= min_valid_fraction {
                n += 1;
                waste += usize::from(c.is_waste());
            }
        }
    }
    score(region_id, n, waste)
}

fn score<T: Scalar>(region_id: &str, n: usize, waste: usize) -> Result<RegionSummary<T>> {
    if n == 0 {
        return Err(Error::Undefined(format!("region {region_id} has no analyzed tiles")));
    }
    Ok(RegionSummary {
        region_id: region_id.to_string(),
        n_tiles_analyzed: n,
        n_waste: waste,
        oddmswc: T::from_count(100 * waste) / T::from_count(n),
        rank: None,
    })
}

/// Scores every region in a prediction table (each row counts as analyzed).
pub fn summarize_predictions<T: Scalar>(rows: &[PredictionRow]) -> Result<Vec<RegionSummary<T>>> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in rows {
        let e = counts.entry(&r.key.region_id).or_default();
        e.0 += 1;
        e.1 += usize::from(r.class.is_waste());
    }
    counts.into_iter().map(|(id, (n, w))| score(id, n, w)).collect()
}

/// Descending by score; ties broken by region id.
pub fn rank_regions<T: Scalar>(mut summaries: Vec<RegionSummary<T>>) -> Vec<RegionSummary<T>> {
    summaries.sort_by(|a, b| {
        b.oddmswc
            .partial_cmp(&a.oddmswc)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.region_id.cmp(&b.region_id))
    });
    for (i, s) in summaries.iter_mut().enumerate() {
        s.rank = Some(i + 1);
    }
    summaries
}

pub fn write_summary_csv<T: Scalar>(summaries: &[RegionSummary<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in summaries {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.region_id,
            r.n_tiles_analyzed,
            r.n_waste,
            r.oddmswc.as_f64(),
            r.rank.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_summary_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<RegionSummary<T>>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(&ctx, "header", format!("{other:?}")),
        })?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != SUMMARY_HEADER {
        return Err(Error::parse(&ctx, "header", format!("expected `{SUMMARY_HEADER}`")));
    }
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let err = |f: &str, e: String| Error::parse(&ctx, format!("{f} (line {line})"), e);
        let oddmswc: f64 = get(3).parse().map_err(|e: std::num::ParseFloatError| err("oddmswc", e.to_string()))?;
        if !(0.0..=100.0).contains(&oddmswc) {
            return Err(err("oddmswc", format!("{oddmswc} outside [0, 100]")));
        }
        out.push(RegionSummary {
            region_id: get(0).to_string(),
            n_tiles_analyzed: get(1).parse().map_err(|e: std::num::ParseIntError| err("n_tiles", e.to_string()))?,
            n_waste: get(2).parse().map_err(|e: std::num::ParseIntError| err("n_waste", e.to_string()))?,
            oddmswc: T::lit(oddmswc),
            rank: match get(4) {
                "" => None,
                v => Some(v.parse().map_err(|e: std::num::ParseIntError| err("rank", e.to_string()))?),
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    GeoJson,
    Csv,
}

/// Writes one feature per predicted grid tile (or waste tiles only) in grid
/// order. Returns the number of features written.
pub fn export_map<T: Scalar>(
    grid: &Grid<T>,
    predictions: &[PredictionRow],
    path: impl AsRef<Path>,
    format: MapFormat,
    waste_only: bool,
) -> Result<usize> {
    let path = path.as_ref();
    let mut by_tile: HashMap<TileId, &PredictionRow> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if grid.get(p.key.tile).is_none() {
            return Err(Error::Join(format!("prediction for {} has no grid tile", p.key)));
        }
        if by_tile.insert(p.key.tile, p).is_some() {
            return Err(Error::Join(format!("duplicate prediction for tile {}", p.key.tile)));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut written = 0;
    let selected = grid
        .tiles
        .iter()
        .filter_map(|t| by_tile.get(&t.tile_id).map(|p| (t, *p)))
        .filter(|(_, p)| !waste_only || p.class.is_waste());
    match format {
        MapFormat::GeoJson => {
            let mut fw = FeatureWriter::begin(out, grid.working_crs).map_err(io)?;
            for (t, p) in selected {
                let id = format!("{}_{}", t.tile_id.row, t.tile_id.col);
                fw.rect_feature(
                    &t.bounds,
                    &[
                        ("region_id", PropValue::Str(&p.key.region_id)),
                        ("tile_id", PropValue::Str(&id)),
                        ("predicted_class", PropValue::Str(p.class.as_str())),
                        ("confidence", PropValue::Float(p.confidence, 6)),
                        ("valid_fraction", PropValue::Float(t.valid_fraction.as_f64(), 6)),
                    ],
                )?;
                written += 1;
            }
            fw.finish().map_err(io)?;
        }
        MapFormat::Csv => {
            let mut out = out;
            writeln!(out, "region_id,row,col,predicted_class,confidence,center_x,center_y").map_err(io)?;
            for (t, p) in selected {
                let c = t.bounds.center();
                writeln!(
                    out,
                    "{},{},{},{},{},{:.3},{:.3}",
                    p.key.region_id,
                    t.tile_id.row,
                    t.tile_id.col,
                    p.class,
                    p.confidence,
                    c.x.as_f64(),
                    c.y.as_f64()
                )
                .map_err(io)?;
                written += 1;
            }
            out.flush().map_err(io)?;
        }
    }
    Ok(written)
}
