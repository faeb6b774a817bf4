//! Labeled tiles: annotation import, per-region balance reporting, and
//! seeded stratified train/val/test splits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geogrid::{Grid, TileId};
use crate::geom::{Point, Polygon};
use crate::records::{Class, TileKey};
use crate::scalar::Scalar;

pub const MANIFEST_HEADER: &str = "region_id,row,col,label,split";
pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub region_id: String,
    pub tile_id: TileId,
    pub label: Class,
    pub annotator: Option<String>,
    pub timestamp: Option<NaiveDate>,
}

impl AnnotationRecord {
    pub fn new(region_id: impl Into<String>, tile_id: TileId, label: Class) -> Self {
        AnnotationRecord {
            region_id: region_id.into(),
            tile_id,
            label,
            annotator: None,
            timestamp: None,
        }
    }

    pub fn key(&self) -> TileKey {
        TileKey::new(self.region_id.clone(), self.tile_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub region_id: String,
    pub tile_id: TileId,
    pub label: Class,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Sorted by (region_id, row, col).
    pub records: Vec<ManifestRecord>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionBalance {
    pub region_id: String,
    pub waste: usize,
    pub background: usize,
    /// Larger class count over smaller; absent when a class is missing.
    pub imbalance_ratio: Option<f64>,
}

pub fn balance_report(records: &[AnnotationRecord]) -> Vec<RegionBalance> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(&r.region_id).or_default();
        match r.label {
            Class::Waste => e.0 += 1,
            Class::Background => e.1 += 1,
        }
    }
    counts
        .into_iter()
        .map(|(region, (w, b))| RegionBalance {
            region_id: region.to_string(),
            waste: w,
            background: b,
            imbalance_ratio: (w.min(b) > 0).then(|| w.max(b) as f64 / w.min(b) as f64),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ImportResult {
    pub records: Vec<AnnotationRecord>,
    pub balance: Vec<RegionBalance>,
    /// Exact duplicates that were dropped.
    pub duplicates: usize,
}

/// Removes exact duplicates and rejects conflicting labels. Output is sorted
/// by (region, row, col).
pub fn dedupe(records: Vec<AnnotationRecord>) -> Result<(Vec<AnnotationRecord>, usize)> {
    let mut seen: HashMap<TileKey, Class> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    let mut dups = 0;
    for r in records {
        match seen.get(&r.key()) {
            Some(&c) if c == r.label => dups += 1,
            Some(_) => {
                return Err(Error::LabelConflict {
                    region_id: r.region_id,
                    tile: r.tile_id,
                })
            }
            None => {
                seen.insert(r.key(), r.label);
                out.push(r);
            }
        }
    }
    out.sort_by(|a, b| (&a.region_id, a.tile_id).cmp(&(&b.region_id, b.tile_id)));
    Ok((out, dups))
}

/// Reads an annotation CSV (`region_id,row,col,label[,annotator][,timestamp]`).
/// A manifest with a `split` column is accepted; the split is ignored.
pub fn import_annotations(path: impl AsRef<Path>) -> Result<ImportResult> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| open_err(path, e))?;
    let headers = rdr.headers()?.clone();
    let col = |n: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(n));
    let need = |n: &str| col(n).ok_or_else(|| Error::parse(&ctx, n, "missing column"));
    let (ri, rowi, coli, li) = (need("region_id")?, need("row")?, need("col")?, need("label")?);
    let (ai, ti) = (col("annotator"), col("timestamp"));

    let mut records = Vec::new();
    let mut bad_labels = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize, name: &str| -> Result<u32> {
            get(i)
                .parse()
                .map_err(|e| Error::parse(&ctx, format!("{name} (line {line})"), e))
        };
        let label = match get(li).parse::<Class>() {
            Ok(l) => l,
            Err(_) => {
                bad_labels.push(format!("line {line}: `{}`", get(li)));
                continue;
            }
        };
        let region_id = get(ri).to_string();
        if region_id.is_empty() {
            return Err(Error::parse(&ctx, format!("region_id (line {line})"), "empty"));
        }
        let timestamp = match ti.map(get).filter(|s| !s.is_empty()) {
            Some(s) => Some(parse_date(s).ok_or_else(|| {
                Error::parse(&ctx, format!("timestamp (line {line})"), format!("bad date `{s}`"))
            })?),
            None => None,
        };
        records.push(AnnotationRecord {
            region_id,
            tile_id: TileId::new(num(rowi, "row")?, num(coli, "col")?),
            label,
            annotator: ai.map(get).filter(|s| !s.is_empty()).map(str::to_string),
            timestamp,
        });
    }
    if !bad_labels.is_empty() {
        return Err(Error::Validation(format!(
            "{ctx}: unknown labels (expected waste/background) at {}",
            bad_labels.join(", ")
        )));
    }
    finish_import(records)
}

fn finish_import(records: Vec<AnnotationRecord>) -> Result<ImportResult> {
    let (records, duplicates) = dedupe(records)?;
    let balance = balance_report(&records);
    for b in &balance {
        tracing::info!(
            region = %b.region_id,
            waste = b.waste,
            background = b.background,
            imbalance = ?b.imbalance_ratio,
            "annotation balance"
        );
    }
    Ok(ImportResult {
        records,
        balance,
        duplicates,
    })
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.date_naive()))
}

fn open_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), "header", format!("{other:?}")),
    }
}

/// Reads GeoJSON annotations and snaps them to grid tiles. Points label the
/// tile containing them; polygons label every grid tile whose centre lies
/// inside. Each feature needs `label`; `region_id` comes from the feature or
/// falls back to `default_region`. Coordinates must be in the grid CRS, or
/// WGS84 lon/lat when `wgs84` is set.
pub fn import_annotations_geojson<T: Scalar>(
    path: impl AsRef<Path>,
    grid: &Grid<T>,
    default_region: Option<&str>,
    wgs84: bool,
) -> Result<ImportResult> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(&ctx, "json", e))?;
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| Error::parse(&ctx, "features", "not a FeatureCollection"))?;
    let to_grid = |x: f64, y: f64| -> Result<Point<T>> {
        let p = Point::new(T::lit(x), T::lit(y));
        if wgs84 {
            grid.working_crs.from_geographic(p)
        } else {
            Ok(p)
        }
    };
    let ring = |v: &serde_json::Value, i: usize| -> Result<Vec<Point<T>>> {
        v.as_array()
            .ok_or_else(|| Error::parse(&ctx, format!("features[{i}].geometry"), "bad ring"))?
            .iter()
            .map(|c| match (c[0].as_f64(), c[1].as_f64()) {
                (Some(x), Some(y)) => to_grid(x, y),
                _ => Err(Error::parse(&ctx, format!("features[{i}].geometry"), "bad coordinate")),
            })
            .collect()
    };

    let mut records = Vec::new();
    let mut bad_labels = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let props = &f["properties"];
        let label_raw = props["label"].as_str().unwrap_or("");
        let label = match label_raw.parse::<Class>() {
            Ok(l) => l,
            Err(_) => {
                bad_labels.push(format!("feature {i}: `{label_raw}`"));
                continue;
            }
        };
        let region = props["region_id"]
            .as_str()
            .or(default_region)
            .ok_or_else(|| Error::parse(&ctx, format!("features[{i}].properties.region_id"), "missing"))?
            .to_string();
        let geom = &f["geometry"];
        let coords = &geom["coordinates"];
        let polygons: Vec<Polygon<T>> = match geom["type"].as_str() {
            Some("Point") => {
                let p = match (coords[0].as_f64(), coords[1].as_f64()) {
                    (Some(x), Some(y)) => to_grid(x, y)?,
                    _ => return Err(Error::parse(&ctx, format!("features[{i}].geometry"), "bad point")),
                };
                if let Some(id) = grid.locate(p).filter(|id| grid.get(*id).is_some()) {
                    records.push(AnnotationRecord::new(region, id, label));
                } else {
                    tracing::warn!(feature = i, "annotation point outside grid; ignored");
                }
                continue;
            }
            Some("Polygon") => vec![polygon_from(coords, i, &ring)?],
            Some("MultiPolygon") => coords
                .as_array()
                .into_iter()
                .flatten()
                .map(|p| polygon_from(p, i, &ring))
                .collect::<Result<_>>()?,
            other => {
                return Err(Error::parse(
                    &ctx,
                    format!("features[{i}].geometry.type"),
                    format!("unsupported geometry {other:?}"),
                ))
            }
        };
        for t in &grid.tiles {
            let c = t.bounds.center();
            if polygons.iter().any(|p| p.contains_point(c)) {
                records.push(AnnotationRecord::new(region.clone(), t.tile_id, label));
            }
        }
    }
    if !bad_labels.is_empty() {
        return Err(Error::Validation(format!(
            "{ctx}: unknown labels (expected waste/background) at {}",
            bad_labels.join(", ")
        )));
    }
    finish_import(records)
}

fn polygon_from<T: Scalar>(
    coords: &serde_json::Value,
    i: usize,
    ring: &impl Fn(&serde_json::Value, usize) -> Result<Vec<Point<T>>>,
) -> Result<Polygon<T>> {
    let rings = coords.as_array().cloned().unwrap_or_default();
    let mut it = rings.iter();
    let exterior = ring(it.next().unwrap_or(&serde_json::Value::Null), i)?;
    let holes = it.map(|h| ring(h, i)).collect::<Result<Vec<_>>>()?;
    Ok(Polygon::with_holes(exterior, holes))
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Parses `0.7,0.15,0.15`.
pub fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad ratios `{s}`: {e}")))?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| Error::Config(format!("expected three ratios, got `{s}`")))?;
    validate_ratios(ratios)?;
    Ok(ratios)
}

/// Largest-remainder allocation of `n` items; ties go to the earlier split.
pub fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| {
        let q = n as f64 * r;
        let nearest = q.round();
        if (q - nearest).abs() < 1e-9 {
            nearest
        } else {
            q
        }
    });
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn stratum_seed(seed: u64, region: &str, label: Class) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((region.len() as u64).to_le_bytes());
    h.update(region.as_bytes());
    h.update([label.index() as u8]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Stratified split by (region, label). Returns the manifest and any warnings
/// about strata too small to populate every split.
pub fn make_splits(
    records: &[AnnotationRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(DatasetManifest, Vec<String>)> {
    validate_ratios(ratios)?;
    let (records, _) = dedupe(records.to_vec())?;
    let mut strata: BTreeMap<(&str, Class), Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in &records {
        strata.entry((&r.region_id, r.label)).or_default().push(r);
    }
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(records.len());
    for ((region, label), mut members) in strata {
        if members.len() < 3 {
            let msg = format!(
                "stratum ({region}, {label}) has {} records; not every split can be populated",
                members.len()
            );
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
        members.sort_by_key(|r| r.tile_id);
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed(seed, region, label));
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), ratios);
        let mut it = members.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for r in it.by_ref().take(n) {
                out.push(ManifestRecord {
                    region_id: r.region_id.clone(),
                    tile_id: r.tile_id,
                    label: r.label,
                    split,
                });
            }
        }
    }
    out.sort_by(|a, b| (&a.region_id, a.tile_id).cmp(&(&b.region_id, b.tile_id)));
    Ok((
        DatasetManifest {
            records: out,
            seed,
            ratios,
        },
        warnings,
    ))
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    seed: u64,
    ratios: [f64; 3],
}

/// Sidecar holding the seed and ratios next to a manifest CSV.
pub fn manifest_meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the trainer-facing manifest CSV plus its metadata sidecar.
pub fn export_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut rows: Vec<&ManifestRecord> = manifest.records.iter().collect();
    rows.sort_by(|a, b| (&a.region_id, a.tile_id).cmp(&(&b.region_id, b.tile_id)));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")?;
        for r in rows {
            writeln!(w, "{},{},{},{},{}", r.region_id, r.tile_id.row, r.tile_id.col, r.label, r.split)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))?;
    let meta = ManifestMeta {
        seed: manifest.seed,
        ratios: manifest.ratios,
    };
    let meta_path = manifest_meta_path(path);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable"))
        .map_err(|e| Error::io(meta_path, e))
}

/// Reads a manifest CSV; seed and ratios come from the sidecar when present
/// (otherwise seed 0 and the default ratios).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| open_err(path, e))?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != MANIFEST_HEADER {
        return Err(Error::parse(&ctx, "header", format!("expected `{MANIFEST_HEADER}`")));
    }
    let mut records = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::parse(&ctx, format!("{name} (line {line})"), "missing"))
        };
        let perr = |name: &str, e: String| Error::parse(&ctx, format!("{name} (line {line})"), e);
        records.push(ManifestRecord {
            region_id: field(0, "region_id")?.to_string(),
            tile_id: TileId::new(
                field(1, "row")?.parse().map_err(|e: std::num::ParseIntError| perr("row", e.to_string()))?,
                field(2, "col")?.parse().map_err(|e: std::num::ParseIntError| perr("col", e.to_string()))?,
            ),
            label: field(3, "label")?.parse().map_err(|e| perr("label", e))?,
            split: field(4, "split")?.parse().map_err(|e| perr("split", e))?,
        });
    }
    let meta_path = manifest_meta_path(path);
    let meta = match std::fs::read_to_string(&meta_path) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| Error::parse(meta_path.display().to_string(), "json", e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ManifestMeta {
            seed: 0,
            ratios: DEFAULT_RATIOS,
        },
        Err(e) => return Err(Error::io(meta_path, e)),
    };
    Ok(DatasetManifest {
        records,
        seed: meta.seed,
        ratios: meta.ratios,
    })
}
