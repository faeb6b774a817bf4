//! Zonal aggregation of indicator layers to region extents and rank
//! correlation of the contamination score against them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geo::GeodesicArea;
use rayon::prelude::*;
use serde::Serialize;

use crate::crs::Crs;
use crate::error::{Error, Result};
use crate::evalsuite::average_ranks;
use crate::geom::{Point, Polygon, Rect};
use crate::raster::{PixelWindow, RasterDataset};
use crate::scalar::Scalar;
use crate::wastemap::RegionSummary;

/// Name of the response variable in reports.
pub const RESPONSE: &str = "oddmswc";
pub const MIN_SAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
    /// Sum divided by the geodesic region area in km².
    Density,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            "density" => Ok(Aggregation::Density),
            other => Err(Error::Config(format!("unknown aggregation `{other}` (mean, sum, density)"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
            Aggregation::Density => "density",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSource {
    Raster { path: PathBuf, band: usize },
    /// CSV with `region_id,value`.
    Table(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorLayer {
    pub name: String,
    pub source: LayerSource,
    pub aggregation: Aggregation,
}

impl IndicatorLayer {
    /// Default aggregation by name: population layers become densities,
    /// everything else is averaged.
    pub fn default_aggregation(name: &str) -> Aggregation {
        if name.starts_with("pop") {
            Aggregation::Density
        } else {
            Aggregation::Mean
        }
    }

    /// Parses `name=path[:aggregation]`. Paths ending in `.csv` are tables.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, rest) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("layer `{spec}`: expected name=path")))?;
        let name = name.trim().to_string();
        if name.is_empty() || name == RESPONSE {
            return Err(Error::Config(format!("layer `{spec}`: invalid name")));
        }
        let (path, aggregation) = match rest.rsplit_once(':') {
            Some((p, a)) if a.parse::<Aggregation>().is_ok() => (p, a.parse()?),
            _ => (rest, Self::default_aggregation(&name)),
        };
        let path = PathBuf::from(path.trim());
        let is_table = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        Ok(IndicatorLayer {
            name,
            source: if is_table {
                LayerSource::Table(path)
            } else {
                LayerSource::Raster { path, band: 0 }
            },
            aggregation,
        })
    }
}

/// Region outline as one or more polygons in `crs`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionExtent {
    pub region_id: String,
    pub crs: Crs,
    pub polygons: Vec<Polygon<f64>>,
}

impl RegionExtent {
    fn in_crs(&self, target: &Crs) -> Result<Vec<Polygon<f64>>> {
        if self.crs == *target {
            return Ok(self.polygons.clone());
        }
        let tr = |ring: &[Point<f64>]| -> Result<Vec<Point<f64>>> {
            ring.iter().map(|p| self.crs.transform_to(target, *p)).collect()
        };
        self.polygons
            .iter()
            .map(|p| {
                Ok(Polygon::with_holes(
                    tr(&p.exterior)?,
                    p.holes.iter().map(|h| tr(h)).collect::<Result<_>>()?,
                ))
            })
            .collect()
    }

    /// Geodesic area on the WGS84 ellipsoid.
    pub fn area_km2(&self) -> Result<f64> {
        let mut total = 0.0;
        for p in self.in_crs(&Crs::Geographic)? {
            let ring = |r: &[Point<f64>]| geo::LineString::from(r.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>());
            let poly = geo::Polygon::new(ring(&p.exterior), p.holes.iter().map(|h| ring(h)).collect());
            total += poly.geodesic_area_unsigned();
        }
        Ok(total / 1e6)
    }

    pub fn contains(&self, p: Point<f64>) -> bool {
        self.polygons.iter().any(|poly| poly.contains_point(p))
    }
}

/// Reads region outlines from a GeoJSON FeatureCollection with a
/// `region_id` property per feature. Coordinates are lon/lat unless the
/// collection names another CRS (`urn:ogc:def:crs:EPSG::n` or `EPSG:n`).
pub fn read_regions_geojson(path: impl AsRef<Path>) -> Result<Vec<RegionExtent>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(&ctx, "json", e))?;
    let crs = match doc["crs"]["properties"]["name"].as_str() {
        None => Crs::Geographic,
        Some(name) => {
            let code = name.rsplit(':').next().unwrap_or("");
            code.parse::<u32>()
                .map(Crs::from_epsg)
                .map_err(|_| Error::parse(&ctx, "crs", format!("unrecognized `{name}`")))?
        }
    };
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| Error::parse(&ctx, "features", "not a FeatureCollection"))?;
    let ring = |v: &serde_json::Value, field: &str| -> Result<Vec<Point<f64>>> {
        v.as_array()
            .ok_or_else(|| Error::parse(&ctx, field, "bad ring"))?
            .iter()
            .map(|c| match (c[0].as_f64(), c[1].as_f64()) {
                (Some(x), Some(y)) => Ok(Point::new(x, y)),
                _ => Err(Error::parse(&ctx, field, "bad coordinate")),
            })
            .collect()
    };
    let polygon = |v: &serde_json::Value, field: &str| -> Result<Polygon<f64>> {
        let rings = v.as_array().ok_or_else(|| Error::parse(&ctx, field, "bad polygon"))?;
        let mut it = rings.iter();
        let ext = ring(it.next().ok_or_else(|| Error::parse(&ctx, field, "empty polygon"))?, field)?;
        Ok(Polygon::with_holes(ext, it.map(|h| ring(h, field)).collect::<Result<_>>()?))
    };
    let mut by_region: BTreeMap<String, Vec<Polygon<f64>>> = BTreeMap::new();
    for (i, f) in features.iter().enumerate() {
        let field = format!("features[{i}]");
        let id = match &f["properties"]["region_id"] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => return Err(Error::parse(&ctx, format!("{field}.properties.region_id"), "missing")),
        };
        let g = &f["geometry"];
        let polys = match g["type"].as_str() {
            Some("Polygon") => vec![polygon(&g["coordinates"], &field)?],
            Some("MultiPolygon") => g["coordinates"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|p| polygon(p, &field))
                .collect::<Result<_>>()?,
            other => return Err(Error::parse(&ctx, format!("{field}.geometry.type"), format!("unsupported {other:?}"))),
        };
        by_region.entry(id).or_default().extend(polys);
    }
    Ok(by_region
        .into_iter()
        .map(|(region_id, polygons)| RegionExtent { region_id, crs, polygons })
        .collect())
}

/// Aggregates raster cells whose centres fall inside the extent; nodata
/// cells are skipped.
pub fn zonal_aggregate<T: Scalar>(
    raster: &RasterDataset,
    band: usize,
    extent: &RegionExtent,
    aggregation: Aggregation,
) -> Result<T> {
    let meta = raster.meta();
    let polys = extent.in_crs(&meta.crs)?;
    let local = RegionExtent {
        region_id: extent.region_id.clone(),
        crs: meta.crs,
        polygons: polys,
    };
    let no_cells = || Error::Coverage(format!("region {} covers no valid cells of {}", extent.region_id, raster.path().display()));
    let bbox = local
        .polygons
        .iter()
        .filter_map(|p| p.bbox())
        .reduce(|a, b| Rect::new(a.min_x.min(b.min_x), a.min_y.min(b.min_y), a.max_x.max(b.max_x), a.max_y.max(b.max_y)))
        .ok_or_else(no_cells)?;
    let inv = meta.transform.inverse()?;
    let (mut c0, mut c1, mut r0, mut r1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in bbox.corners() {
        let q = inv.apply(p.x, p.y);
        c0 = c0.min(q.x);
        c1 = c1.max(q.x);
        r0 = r0.min(q.y);
        r1 = r1.max(q.y);
    }
    let clamp = |v: f64, hi: u32| v.max(0.0).min(f64::from(hi)) as u32;
    let (col0, col1) = (clamp(c0.floor(), meta.width_px), clamp(c1.ceil(), meta.width_px));
    let (row0, row1) = (clamp(r0.floor(), meta.height_px), clamp(r1.ceil(), meta.height_px));
    if col1 <= col0 || row1 <= row0 {
        return Err(no_cells());
    }
    let window = PixelWindow::new(row0, col0, row1 - row0, col1 - col0);
    let values = raster.reader()?.read_band_values(&window, band)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, v) in values.iter().enumerate() {
        let Some(v) = v else { continue };
        let (r, c) = (i / window.width as usize, i % window.width as usize);
        let center = meta
            .transform
            .apply(f64::from(col0) + c as f64 + 0.5, f64::from(row0) + r as f64 + 0.5);
        if local.contains(center) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(no_cells());
    }
    Ok(T::lit(match aggregation {
        Aggregation::Mean => sum / n as f64,
        Aggregation::Sum => sum,
        Aggregation::Density => sum / extent.area_km2()?,
    }))
}

/// Reads a `region_id,value` table; empty or non-finite values are missing.
pub fn read_region_table<T: Scalar>(path: impl AsRef<Path>) -> Result<BTreeMap<String, Option<T>>> {
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
    let id_col = headers
        .iter()
        .position(|h| h == "region_id")
        .ok_or_else(|| Error::parse(&ctx, "header", "missing `region_id` column"))?;
    let val_col = headers
        .iter()
        .position(|h| h == "value")
        .or_else(|| (headers.len() == 2).then_some(1 - id_col))
        .ok_or_else(|| Error::parse(&ctx, "header", "missing `value` column"))?;
    let mut out = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(val_col).unwrap_or("");
        let v = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::parse(&ctx, format!("value (line {})", n + 2), format!("`{raw}` is not a number")))?;
            v.is_finite().then(|| T::lit(v))
        };
        out.insert(rec.get(id_col).unwrap_or("").to_string(), v);
    }
    Ok(out)
}

/// Per-region values of one layer. Regions that cannot be aggregated
/// (no coverage) map to `None`.
pub fn layer_values<T: Scalar>(layer: &IndicatorLayer, extents: &[RegionExtent]) -> Result<BTreeMap<String, Option<T>>> {
    match &layer.source {
        LayerSource::Table(path) => read_region_table(path),
        LayerSource::Raster { path, band } => {
            let ds = RasterDataset::open(path)?;
            extents
                .par_iter()
                .map(|e| match zonal_aggregate::<T>(&ds, *band, e, layer.aggregation) {
                    Ok(v) => Ok((e.region_id.clone(), v.is_finite().then_some(v))),
                    Err(Error::Coverage(msg)) => {
                        tracing::warn!(layer = %layer.name, region = %e.region_id, "{msg}");
                        Ok((e.region_id.clone(), None))
                    }
                    Err(err) => Err(err),
                })
                .collect()
        }
    }
}

fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    let n = T::from_count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Some(r.max(-T::one()).min(T::one()))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < MIN_SAMPLE {
        return Err(Error::SampleSize {
            needed: MIN_SAMPLE,
            actual: x.len(),
        });
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Undefined("rank variance is zero".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint<T> {
    pub region_id: String,
    pub x: T,
    pub y: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult<T> {
    pub x: String,
    pub y: String,
    pub rho: T,
    pub n: usize,
    /// Regions left out: requested exclusions plus missing values.
    pub excluded_regions: Vec<String>,
    #[serde(skip)]
    pub points: Vec<ScatterPoint<T>>,
}

impl<T> CorrelationResult<T> {
    pub fn pair(&self) -> String {
        format!("{}~{}", self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BivariateReport<T> {
    pub regions: usize,
    pub excluded: Vec<String>,
    /// Response against each layer, in layer order.
    pub response: Vec<CorrelationResult<T>>,
    /// Every pair of layers.
    pub predictors: Vec<CorrelationResult<T>>,
}

impl<T: Scalar> BivariateReport<T> {
    pub fn get(&self, x: &str, y: &str) -> Option<&CorrelationResult<T>> {
        self.response
            .iter()
            .chain(&self.predictors)
            .find(|r| (r.x == x && r.y == y) || (r.x == y && r.y == x))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let row = |r: &CorrelationResult<T>| {
            serde_json::json!({
                "pair": r.pair(),
                "x": r.x,
                "y": r.y,
                "rho": r.rho.as_f64(),
                "n": r.n,
                "excluded_regions": r.excluded_regions,
            })
        };
        serde_json::json!({
            "method": "spearman",
            "regions": self.regions,
            "excluded": self.excluded,
            "response": self.response.iter().map(row).collect::<Vec<_>>(),
            "predictors": self.predictors.iter().map(row).collect::<Vec<_>>(),
        })
    }

    /// Writes `report.json` and one `scatter_<x>__<y>.csv` per pair.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let report = dir.join("report.json");
        let text = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        std::fs::write(&report, text + "\n").map_err(|e| Error::io(&report, e))?;
        written.push(report);
        for r in self.response.iter().chain(&self.predictors) {
            let path = dir.join(format!("scatter_{}__{}.csv", r.x, r.y));
            let mut s = format!("region_id,{},{}\n", r.x, r.y);
            for p in &r.points {
                s.push_str(&format!("{},{},{}\n", p.region_id, p.x, p.y));
            }
            std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn correlate<T: Scalar>(
    x_name: &str,
    y_name: &str,
    regions: &[String],
    x: &BTreeMap<String, Option<T>>,
    y: &BTreeMap<String, Option<T>>,
    excluded: &BTreeSet<String>,
) -> Result<CorrelationResult<T>> {
    let mut points = Vec::new();
    let mut dropped: Vec<String> = excluded.iter().cloned().collect();
    for id in regions.iter().filter(|id| !excluded.contains(*id)) {
        match (x.get(id).copied().flatten(), y.get(id).copied().flatten()) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => points.push(ScatterPoint {
                region_id: id.clone(),
                x: a,
                y: b,
            }),
            _ => dropped.push(id.clone()),
        }
    }
    dropped.sort();
    let xs: Vec<T> = points.iter().map(|p| p.x).collect();
    let ys: Vec<T> = points.iter().map(|p| p.y).collect();
    let rho = spearman(&xs, &ys).map_err(|e| match e {
        Error::Undefined(m) => Error::Undefined(format!("{x_name} vs {y_name}: {m}")),
        other => other,
    })?;
    Ok(CorrelationResult {
        x: x_name.to_string(),
        y: y_name.to_string(),
        rho,
        n: points.len(),
        excluded_regions: dropped,
        points,
    })
}

/// Spearman correlations of the score against each layer and between all
/// layer pairs. Each pair uses the regions where both values exist.
pub fn bivariate_report<T: Scalar>(
    summaries: &[RegionSummary<T>],
    layers: &[(String, BTreeMap<String, Option<T>>)],
) -> Result<BivariateReport<T>> {
    sensitivity_exclude(summaries, layers, &[])
}

/// Same analysis with the listed regions removed.
pub fn sensitivity_exclude<T: Scalar>(
    summaries: &[RegionSummary<T>],
    layers: &[(String, BTreeMap<String, Option<T>>)],
    exclude: &[String],
) -> Result<BivariateReport<T>> {
    let regions: Vec<String> = summaries.iter().map(|s| s.region_id.clone()).collect();
    let excluded: BTreeSet<String> = exclude.iter().cloned().collect();
    for id in &excluded {
        if !regions.contains(id) {
            tracing::warn!(region = %id, "excluded region not present in summary");
        }
    }
    let remaining = regions.iter().filter(|r| !excluded.contains(*r)).count();
    if remaining < MIN_SAMPLE {
        return Err(Error::SampleSize {
            needed: MIN_SAMPLE,
            actual: remaining,
        });
    }
    let response: BTreeMap<String, Option<T>> =
        summaries.iter().map(|s| (s.region_id.clone(), Some(s.oddmswc))).collect();
    let mut report = BivariateReport {
        regions: remaining,
        excluded: excluded.iter().cloned().collect(),
        response: Vec::new(),
        predictors: Vec::new(),
    };
    for (name, values) in layers {
        report.response.push(correlate(RESPONSE, name, &regions, &response, values, &excluded)?);
    }
    for (i, (a, va)) in layers.iter().enumerate() {
        for (b, vb) in &layers[i + 1..] {
            report.predictors.push(correlate(a, b, &regions, va, vb, &excluded)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Affine;
    use crate::raster::{write_geotiff, RasterData, RasterMeta, WriteOptions};
    use approx::assert_abs_diff_eq;

    /// Rank by counting: smaller values plus half the ties.
    fn count_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let eq = v.iter().filter(|b| *b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }

    fn oracle_rho(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (count_ranks(x), count_ranks(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_cases() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        let (x, y) = ([1.0, 2.0, 2.0, 3.0], [1.0, 3.0, 2.0, 4.0]);
        assert_abs_diff_eq!(spearman(&x, &y).unwrap(), oracle_rho(&x, &y), epsilon = 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Undefined(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::SampleSize { .. })));
    }

    #[test]
    fn spearman_invariants() {
        let x: Vec<f64> = (0..29).map(|i| ((i * 17) % 29) as f64 * 0.3 - 2.0).collect();
        let y: Vec<f64> = (0..29).map(|i| ((i * 11) % 13) as f64 + (i % 3) as f64).collect();
        let r = spearman(&x, &y).unwrap();
        let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert_abs_diff_eq!(r, spearman(&ex, &y).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, spearman(&y, &x).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, oracle_rho(&x, &y), epsilon = 1e-12);
        let xf: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let yf: Vec<f32> = y.iter().map(|v| *v as f32).collect();
        assert_abs_diff_eq!(f64::from(spearman(&xf, &yf).unwrap()), r, epsilon = 1e-5);
    }

    fn summaries(vals: &[f64]) -> Vec<RegionSummary<f64>> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| RegionSummary {
                region_id: format!("r{i:02}"),
                n_tiles_analyzed: 1000,
                n_waste: (*v * 10.0) as usize,
                oddmswc: *v,
                rank: None,
            })
            .collect()
    }

    fn layer(vals: impl IntoIterator<Item = Option<f64>>) -> BTreeMap<String, Option<f64>> {
        vals.into_iter().enumerate().map(|(i, v)| (format!("r{i:02}"), v)).collect()
    }

    #[test]
    fn report_on_planted_relation() {
        let score: Vec<f64> = (0..29).map(|i| 0.5 + ((i * 7) % 29) as f64 * 0.4).collect();
        let s = summaries(&score);
        let layers = vec![
            ("self".to_string(), layer(score.iter().map(|v| Some(*v)))),
            ("infra".to_string(), layer(score.iter().map(|v| Some(v.ln() * 3.0 + 1.0)))),
            ("pop".to_string(), layer((0..29).map(|i| Some(((i * 5) % 11) as f64)))),
        ];
        let r = bivariate_report(&s, &layers).unwrap();
        assert_eq!(r.response.len(), 3);
        assert_eq!(r.predictors.len(), 3);
        assert_abs_diff_eq!(r.get(RESPONSE, "self").unwrap().rho, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(RESPONSE, "infra").unwrap().rho, 1.0, epsilon = 1e-12);
        let pop: Vec<f64> = (0..29).map(|i| ((i * 5) % 11) as f64).collect();
        assert_abs_diff_eq!(r.get(RESPONSE, "pop").unwrap().rho, oracle_rho(&score, &pop), epsilon = 1e-12);
        assert_eq!(sensitivity_exclude(&s, &layers, &[]).unwrap(), r);

        let dir = tempfile::tempdir().unwrap();
        let files = r.write(dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        let scatter = std::fs::read_to_string(dir.path().join("scatter_oddmswc__pop.csv")).unwrap();
        assert_eq!(scatter.lines().count(), 30);
    }

    #[test]
    fn missing_values_are_excluded() {
        let s = summaries(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let layers = vec![("a".to_string(), layer([Some(1.0), None, Some(3.0), Some(2.0), Some(5.0)]))];
        let r = bivariate_report(&s, &layers).unwrap();
        let c = &r.response[0];
        assert_eq!((c.n, c.excluded_regions.clone()), (4, vec!["r01".to_string()]));
        assert_abs_diff_eq!(c.rho, oracle_rho(&[1.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0]), epsilon = 1e-12);
    }

    #[test]
    fn outlier_exclusion() {
        let mut score: Vec<f64> = (0..29).map(|i| i as f64).collect();
        let mut pop: Vec<f64> = (0..29).map(|i| i as f64 + if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
        score[28] = 100.0;
        pop[28] = -50.0;
        let s = summaries(&score);
        let layers = vec![("pop".to_string(), layer(pop.iter().map(|v| Some(*v))))];
        let full = bivariate_report(&s, &layers).unwrap().response[0].rho;
        let ex = sensitivity_exclude(&s, &layers, &["r28".to_string()]).unwrap();
        assert!(ex.response[0].rho.abs() > full.abs());
        assert_eq!(ex.response[0].excluded_regions, vec!["r28".to_string()]);
        assert_eq!(ex.response[0].n, 28);
        let all_but_two: Vec<String> = (2..29).map(|i| format!("r{i:02}")).collect();
        assert!(matches!(
            sensitivity_exclude(&s, &layers, &all_but_two),
            Err(Error::SampleSize { needed: 3, actual: 2 })
        ));
    }

    fn raster(dir: &Path, name: &str, w: u32, h: u32, values: Vec<f32>, nodata: Option<f64>) -> RasterDataset {
        let meta = RasterMeta::new(w, h, Affine::north_up(500_000.0, 9_000_000.0, 10.0, 10.0), Crs::Utm { zone: 37, south: true }, 1, 32)
            .unwrap()
            .with_nodata(nodata);
        let p = dir.join(name);
        write_geotiff(&p, &meta, &RasterData::F32(values), WriteOptions::default()).unwrap();
        RasterDataset::open(&p).unwrap()
    }

    fn rect_extent(x0: f64, y0: f64, x1: f64, y1: f64) -> RegionExtent {
        RegionExtent {
            region_id: "z".into(),
            crs: Crs::Utm { zone: 37, south: true },
            polygons: vec![Rect::new(x0, y0, x1, y1).to_polygon()],
        }
    }

    #[test]
    fn zonal_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let c = raster(dir.path(), "c.tif", 20, 20, vec![100.0; 400], None);
        let e = rect_extent(500_013.0, 8_999_870.0, 500_144.0, 8_999_977.0);
        assert_abs_diff_eq!(zonal_aggregate::<f64>(&c, 0, &e, Aggregation::Mean).unwrap(), 100.0, epsilon = 1e-12);

        let q = raster(dir.path(), "q.tif", 2, 2, vec![1.0, 2.0, 3.0, 4.0], None);
        let full = rect_extent(500_000.0, 8_999_980.0, 500_020.0, 9_000_000.0);
        assert_eq!(zonal_aggregate::<f64>(&q, 0, &full, Aggregation::Sum).unwrap(), 10.0);

        // cell (r, c) holds r * 20 + c; -1 is nodata
        let vals: Vec<f32> = (0..400).map(|i| if i % 37 == 0 { -1.0 } else { i as f32 }).collect();
        let g = raster(dir.path(), "g.tif", 20, 20, vals.clone(), Some(-1.0));
        let tri = RegionExtent {
            region_id: "t".into(),
            crs: Crs::Utm { zone: 37, south: true },
            polygons: vec![Polygon::new(vec![
                Point::new(500_000.0, 9_000_000.0),
                Point::new(500_200.0, 9_000_000.0),
                Point::new(500_000.0, 8_999_800.0),
            ])],
        };
        // centre (c+0.5, r+0.5) in pixel units lies in the triangle when c + r + 1 < 20
        let (mut sum, mut n) = (0.0, 0);
        for r in 0..20 {
            for c in 0..20 {
                let v = vals[r * 20 + c];
                if c + r + 1 < 20 && v != -1.0 {
                    sum += f64::from(v);
                    n += 1;
                }
            }
        }
        assert_abs_diff_eq!(zonal_aggregate::<f64>(&g, 0, &tri, Aggregation::Sum).unwrap(), sum, epsilon = 1e-9);
        assert_abs_diff_eq!(zonal_aggregate::<f64>(&g, 0, &tri, Aggregation::Mean).unwrap(), sum / n as f64, epsilon = 1e-9);

        let outside = rect_extent(600_000.0, 8_000_000.0, 600_100.0, 8_000_100.0);
        assert!(matches!(zonal_aggregate::<f64>(&g, 0, &outside, Aggregation::Mean), Err(Error::Coverage(_))));
    }

    #[test]
    fn density_uses_geodesic_area() {
        let dir = tempfile::tempdir().unwrap();
        let c = raster(dir.path(), "p.tif", 20, 20, vec![5.0; 400], None);
        let e = rect_extent(500_000.0, 8_999_800.0, 500_200.0, 9_000_000.0);
        let area = e.area_km2().unwrap();
        assert!((area - 0.04).abs() < 0.04 * 0.002, "area {area}");
        let d = zonal_aggregate::<f64>(&c, 0, &e, Aggregation::Density).unwrap();
        assert_abs_diff_eq!(d, 2000.0 / area, epsilon = 1e-6);
    }

    #[test]
    fn layer_specs_and_tables() {
        let l = IndicatorLayer::parse("pop=/data/pop.tif").unwrap();
        assert_eq!(l.aggregation, Aggregation::Density);
        let l = IndicatorLayer::parse("shdi=/data/shdi.csv").unwrap();
        assert!(matches!(l.source, LayerSource::Table(_)));
        assert_eq!(IndicatorLayer::parse("pop=/x.tif:sum").unwrap().aggregation, Aggregation::Sum);
        assert!(IndicatorLayer::parse("nothing").is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "region_id,value\na,0.5\nb,\nc,2\n").unwrap();
        let t = read_region_table::<f64>(&p).unwrap();
        assert_eq!(t["a"], Some(0.5));
        assert_eq!(t["b"], None);
        std::fs::write(&p, "region_id,value\na,x\n").unwrap();
        assert!(matches!(read_region_table::<f64>(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn regions_from_geojson() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.geojson");
        std::fs::write(
            &p,
            r#"{"type":"FeatureCollection","features":[
{"type":"Feature","properties":{"region_id":"a"},"geometry":{"type":"Polygon","coordinates":[[[39,-6],[39.01,-6],[39.01,-6.01],[39,-6]]]}},
{"type":"Feature","properties":{"region_id":"b"},"geometry":{"type":"MultiPolygon","coordinates":[[[[39,-6],[39.01,-6],[39.01,-6.01],[39,-6]]],[[[40,-6],[40.01,-6],[40.01,-6.01],[40,-6]]]]}}]}"#,
        )
        .unwrap();
        let r = read_regions_geojson(&p).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].polygons.len(), 2);
        assert_eq!(r[0].crs, Crs::Geographic);
        assert!(r[0].contains(Point::new(39.008, -6.002)));
    }
}
