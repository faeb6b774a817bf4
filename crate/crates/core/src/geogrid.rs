//! Regular square analysis grid over a raster footprint, laid out in a
//! locally metric CRS, and the mapping from grid cells to pixel windows.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crs::Crs;
use crate::error::{Error, Result};
use crate::geojson::{FeatureWriter, PropValue};
use crate::geom::{Point, Polygon, Rect};
pub use crate::raster::PixelWindow;
use crate::raster::RasterMeta;
use crate::records::Class;
use crate::scalar::{snap, Scalar};

pub const DEFAULT_TILE_SIZE_M: f64 = 5.0;

/// Vertices per edge when a footprint or tile outline is reprojected.
const DENSIFY: usize = 64;

const GRID_CSV_MAGIC: &str = "# dumpscan-grid";
const GRID_CSV_HEADER: &str = "row,col,min_x,min_y,max_x,max_y,row_off,col_off,height,width,valid_fraction";

/// Grid cell index. Row 0 is the northernmost row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub row: u32,
    pub col: u32,
}

impl TileId {
    pub fn new(row: u32, col: u32) -> Self {
        TileId { row, col }
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<T> {
    pub tile_size_m: T,
    /// `None` selects a CRS from the raster (see [`choose_working_crs`]).
    pub working_crs: Option<Crs>,
    /// Lattice anchor; `None` anchors at the CRS origin, so the first tile
    /// edge is the footprint minimum snapped down to a tile multiple.
    pub origin: Option<Point<T>>,
    pub include_partials: bool,
}

impl<T: Scalar> Default for GridSpec<T> {
    fn default() -> Self {
        GridSpec {
            tile_size_m: T::lit(DEFAULT_TILE_SIZE_M),
            working_crs: None,
            origin: None,
            include_partials: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord<T> {
    pub tile_id: TileId,
    pub bounds: Rect<T>,
    pub pixel_window: PixelWindow,
    pub valid_fraction: T,
    pub label: Option<Class>,
    pub prediction: Option<Class>,
    pub confidence: Option<T>,
}

impl<T: Scalar> TileRecord<T> {
    pub fn new(tile_id: TileId, bounds: Rect<T>, pixel_window: PixelWindow, valid_fraction: T) -> Self {
        TileRecord {
            tile_id,
            bounds,
            pixel_window,
            valid_fraction,
            label: None,
            prediction: None,
            confidence: None,
        }
    }
}

/// A generated grid: lattice parameters plus the emitted tiles in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub working_crs: Crs,
    pub tile_size_m: T,
    pub origin: Point<T>,
    /// Lattice column index of grid column 0.
    pub lattice_col0: i64,
    /// Lattice row index (counted northwards from the anchor) of grid row 0.
    pub lattice_row0: i64,
    pub n_rows: u32,
    pub n_cols: u32,
    pub tiles: Vec<TileRecord<T>>,
}

impl<T: Scalar> Grid<T> {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Cell bounds for any index in the grid's lattice.
    pub fn bounds_of(&self, id: TileId) -> Rect<T> {
        lattice_rect(
            self.origin,
            self.tile_size_m,
            self.lattice_col0 + i64::from(id.col),
            self.lattice_row0 - i64::from(id.row),
        )
    }

    /// Index of the cell containing `p` (half-open cells), if within the grid extent.
    pub fn locate(&self, p: Point<T>) -> Option<TileId> {
        let s = self.tile_size_m;
        let i = lattice_floor((p.x - self.origin.x) / s)?;
        let j = lattice_floor((p.y - self.origin.y) / s)?;
        let col = i - self.lattice_col0;
        let row = self.lattice_row0 - j;
        if (0..i64::from(self.n_cols)).contains(&col) && (0..i64::from(self.n_rows)).contains(&row) {
            Some(TileId::new(row as u32, col as u32))
        } else {
            None
        }
    }

    pub fn get(&self, id: TileId) -> Option<&TileRecord<T>> {
        self.tiles
            .binary_search_by(|t| t.tile_id.cmp(&id))
            .ok()
            .map(|i| &self.tiles[i])
    }

    pub fn get_mut(&mut self, id: TileId) -> Option<&mut TileRecord<T>> {
        match self.tiles.binary_search_by(|t| t.tile_id.cmp(&id)) {
            Ok(i) => Some(&mut self.tiles[i]),
            Err(_) => None,
        }
    }
}

fn lattice_rect<T: Scalar>(origin: Point<T>, s: T, i: i64, j: i64) -> Rect<T> {
    let x0 = origin.x + T::from(i).unwrap() * s;
    let y0 = origin.y + T::from(j).unwrap() * s;
    Rect::new(x0, y0, x0 + s, y0 + s)
}

fn snap_tol<T: Scalar>(v: T, min: f64) -> T {
    (T::epsilon() * T::lit(64.0) * v.abs().max(T::one())).max(T::lit(min))
}

fn lattice_floor<T: Scalar>(v: T) -> Option<i64> {
    snap(v, snap_tol(v, 1e-9)).floor().to_i64()
}

fn lattice_ceil<T: Scalar>(v: T) -> Option<i64> {
    snap(v, snap_tol(v, 1e-9)).ceil().to_i64()
}

/// Locally metric CRS for gridding: the raster's own CRS when it measures in
/// true ground metres, otherwise the UTM zone containing the raster centre.
pub fn choose_working_crs<T: Scalar>(meta: &RasterMeta<T>) -> Result<Crs> {
    match meta.crs {
        Crs::Utm { .. } => return Ok(meta.crs),
        Crs::Other { metric: true, .. } => return Ok(meta.crs),
        _ => {}
    }
    let c = meta.crs.to_geographic(meta.center())?;
    if !(c.x.is_finite() && c.y.is_finite()) {
        return Err(Error::Geometry("raster centroid is undefined".into()));
    }
    Crs::utm_for(c.x.as_f64(), c.y.as_f64())
}

enum Footprint<T> {
    Rect(Rect<T>),
    Poly(Polygon<T>),
}

impl<T: Scalar> Footprint<T> {
    fn bbox(&self) -> Rect<T> {
        match self {
            Footprint::Rect(r) => *r,
            Footprint::Poly(p) => p.bbox().expect("non-empty footprint"),
        }
    }

    /// Fraction of `tile` covered by the footprint.
    fn coverage(&self, tile: &Rect<T>) -> T {
        match self {
            Footprint::Rect(r) => tile.intersection(r).area() / tile.area(),
            Footprint::Poly(p) => p.intersection_area(tile) / tile.area(),
        }
    }
}

fn densify_ring<T: Scalar>(corners: &[Point<T>], per_edge: usize) -> Vec<Point<T>> {
    let mut out = Vec::with_capacity(corners.len() * per_edge);
    for (k, &a) in corners.iter().enumerate() {
        let b = corners[(k + 1) % corners.len()];
        for s in 0..per_edge {
            let t = T::from_count(s) / T::from_count(per_edge);
            out.push(Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t));
        }
    }
    out
}

fn footprint_in<T: Scalar>(meta: &RasterMeta<T>, working: &Crs) -> Result<Footprint<T>> {
    if meta.crs == *working {
        if meta.transform.is_north_up() {
            return Ok(Footprint::Rect(meta.bounds()));
        }
        return Ok(Footprint::Poly(meta.footprint()));
    }
    let ring = densify_ring(&meta.footprint().exterior, DENSIFY)
        .into_iter()
        .map(|p| meta.crs.transform_to(working, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Footprint::Poly(Polygon::new(ring)))
}

/// Builds the grid over the raster footprint. Tiles are emitted row-major,
/// north to south and west to east.
pub fn make_grid<T: Scalar>(meta: &RasterMeta<T>, spec: &GridSpec<T>) -> Result<Grid<T>> {
    let s = spec.tile_size_m;
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::Config(format!("tile size must be positive, got {s}")));
    }
    let working = match spec.working_crs {
        Some(c) => c,
        None => choose_working_crs(meta)?,
    };
    if !working.is_metric() || working == Crs::WebMercator {
        return Err(Error::Config(format!(
            "working CRS {working} is not a locally metric projection"
        )));
    }
    let origin = spec.origin.unwrap_or(Point::new(T::zero(), T::zero()));
    let fp = footprint_in(meta, &working)?;
    let bb = fp.bbox();
    let overflow = || Error::Geometry("grid extent overflows the lattice index".into());
    let i0 = lattice_floor((bb.min_x - origin.x) / s).ok_or_else(overflow)?;
    let i1 = lattice_ceil((bb.max_x - origin.x) / s).ok_or_else(overflow)?;
    let j0 = lattice_floor((bb.min_y - origin.y) / s).ok_or_else(overflow)?;
    let j1 = lattice_ceil((bb.max_y - origin.y) / s).ok_or_else(overflow)?;
    let (n_cols, n_rows) = ((i1 - i0).max(0), (j1 - j0).max(0));
    if n_cols > i64::from(u32::MAX) || n_rows > i64::from(u32::MAX) {
        return Err(overflow());
    }

    let full_tol = T::lit(1e-9);
    let include_partials = spec.include_partials;
    // Candidate cells, filtered by coverage; rows processed in parallel.
    let rows: Vec<Result<Vec<TileRecord<T>>>> = (0..n_rows)
        .into_par_iter()
        .map(|r| {
            let j = j1 - 1 - r;
            let mut row = Vec::new();
            for c in 0..n_cols {
                let bounds = lattice_rect(origin, s, i0 + c, j);
                let cov = fp.coverage(&bounds).min(T::one());
                let keep = if include_partials {
                    cov > full_tol
                } else {
                    cov >= T::one() - full_tol
                };
                if !keep {
                    continue;
                }
                let cov = if cov >= T::one() - full_tol { T::one() } else { cov };
                let window = tile_to_window(&bounds, &working, meta)?;
                row.push(TileRecord::new(TileId::new(r as u32, c as u32), bounds, window, cov));
            }
            Ok(row)
        })
        .collect();
    let mut tiles = Vec::new();
    for row in rows {
        tiles.extend(row?);
    }
    Ok(Grid {
        working_crs: working,
        tile_size_m: s,
        origin,
        lattice_col0: i0,
        lattice_row0: j1 - 1,
        n_rows: n_rows as u32,
        n_cols: n_cols as u32,
        tiles,
    })
}

/// Smallest pixel window covering every pixel whose footprint overlaps the
/// interior of `bounds` (given in `working`), clipped to the raster.
pub fn tile_to_window<T: Scalar>(bounds: &Rect<T>, working: &Crs, meta: &RasterMeta<T>) -> Result<PixelWindow> {
    let inv = meta.transform.inverse()?;
    let outline: Vec<Point<T>> = if *working == meta.crs {
        bounds.corners().to_vec()
    } else {
        densify_ring(&bounds.corners(), 8)
            .into_iter()
            .map(|p| working.transform_to(&meta.crs, p))
            .collect::<Result<_>>()?
    };
    let px = Rect::from_points(outline.iter().map(|p| inv.apply(p.x, p.y)))
        .ok_or(Error::EmptyWindow)?;
    let clamp = |v: T, max: u32| -> i64 {
        v.to_i64().unwrap_or(if v > T::zero() { i64::MAX } else { 0 }).clamp(0, i64::from(max))
    };
    let tol = |v: T| snap_tol(v, 1e-6);
    let c0 = clamp(snap(px.min_x, tol(px.min_x)).floor(), meta.width_px);
    let c1 = clamp(snap(px.max_x, tol(px.max_x)).ceil(), meta.width_px);
    let r0 = clamp(snap(px.min_y, tol(px.min_y)).floor(), meta.height_px);
    let r1 = clamp(snap(px.max_y, tol(px.max_y)).ceil(), meta.height_px);
    if c1 <= c0 || r1 <= r0 {
        return Err(Error::EmptyWindow);
    }
    Ok(PixelWindow::new(r0 as u32, c0 as u32, (r1 - r0) as u32, (c1 - c0) as u32))
}

/// Writes the compact CSV grid manifest: a `#` metadata line, a header, and
/// one row per tile. Floats use shortest round-trip formatting.
pub fn write_grid_csv<T: Scalar>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_grid_csv_to(grid, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_grid_csv_to<T: Scalar, W: Write>(grid: &Grid<T>, w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "{GRID_CSV_MAGIC} crs={} tile_size_m={} origin_x={} origin_y={} col0={} row0={} rows={} cols={}",
        grid.working_crs,
        grid.tile_size_m.as_f64(),
        grid.origin.x.as_f64(),
        grid.origin.y.as_f64(),
        grid.lattice_col0,
        grid.lattice_row0,
        grid.n_rows,
        grid.n_cols
    )?;
    writeln!(w, "{GRID_CSV_HEADER}")?;
    for t in &grid.tiles {
        let b = &t.bounds;
        let pw = &t.pixel_window;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.tile_id.row,
            t.tile_id.col,
            b.min_x.as_f64(),
            b.min_y.as_f64(),
            b.max_x.as_f64(),
            b.max_y.as_f64(),
            pw.row_off,
            pw.col_off,
            pw.height,
            pw.width,
            t.valid_fraction.as_f64()
        )?;
    }
    Ok(())
}

pub fn read_grid_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let meta_line = first
        .trim()
        .strip_prefix(GRID_CSV_MAGIC)
        .ok_or_else(|| Error::parse(&ctx, "header", "not a grid manifest"))?;
    let mut kv = std::collections::HashMap::new();
    for part in meta_line.split_whitespace() {
        if let Some((k, v)) = part.split_once('=') {
            kv.insert(k, v);
        }
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::parse(&ctx, k, "missing"));
    fn num<V: std::str::FromStr>(ctx: &str, k: &str, v: &str) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        v.parse().map_err(|e| Error::parse(ctx, k, e))
    }
    let crs: Crs = get("crs")?.parse().map_err(|e| Error::parse(&ctx, "crs", e))?;
    let tile_size_m = T::lit(num::<f64>(&ctx, "tile_size_m", get("tile_size_m")?)?);
    let origin = Point::new(
        T::lit(num::<f64>(&ctx, "origin_x", get("origin_x")?)?),
        T::lit(num::<f64>(&ctx, "origin_y", get("origin_y")?)?),
    );
    let lattice_col0 = num(&ctx, "col0", get("col0")?)?;
    let lattice_row0 = num(&ctx, "row0", get("row0")?)?;
    let n_rows = num(&ctx, "rows", get("rows")?)?;
    let n_cols = num(&ctx, "cols", get("cols")?)?;

    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != GRID_CSV_HEADER {
        return Err(Error::parse(&ctx, "header", "unexpected grid columns"));
    }
    let mut tiles = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 3;
        let f = |i: usize| -> Result<f64> {
            let name = headers.get(i).unwrap_or("?");
            num(&ctx, &format!("{name} (line {line})"), rec.get(i).unwrap_or(""))
        };
        let u = |i: usize| -> Result<u32> {
            let name = headers.get(i).unwrap_or("?");
            num(&ctx, &format!("{name} (line {line})"), rec.get(i).unwrap_or(""))
        };
        let vf = f(10)?;
        if !(0.0..=1.0).contains(&vf) {
            return Err(Error::parse(&ctx, format!("valid_fraction (line {line})"), "outside [0, 1]"));
        }
        tiles.push(TileRecord::new(
            TileId::new(u(0)?, u(1)?),
            Rect::new(T::lit(f(2)?), T::lit(f(3)?), T::lit(f(4)?), T::lit(f(5)?)),
            PixelWindow::new(u(6)?, u(7)?, u(8)?, u(9)?),
            T::lit(vf),
        ));
    }
    if !tiles.windows(2).all(|w| w[0].tile_id < w[1].tile_id) {
        return Err(Error::parse(&ctx, "row,col", "tiles are not in row-major order"));
    }
    Ok(Grid {
        working_crs: crs,
        tile_size_m,
        origin,
        lattice_col0,
        lattice_row0,
        n_rows,
        n_cols,
        tiles,
    })
}

/// GeoJSON export with one polygon per tile (WGS84 when the CRS allows).
pub fn write_grid_geojson<T: Scalar>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut fw = FeatureWriter::begin(BufWriter::new(file), grid.working_crs).map_err(|e| Error::io(path, e))?;
    for t in &grid.tiles {
        let id = format!("{}_{}", t.tile_id.row, t.tile_id.col);
        fw.rect_feature(
            &t.bounds,
            &[
                ("tile_id", PropValue::Str(&id)),
                ("valid_fraction", PropValue::Float(t.valid_fraction.as_f64(), 6)),
            ],
        )?;
    }
    fw.finish().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Affine;
    use proptest::prelude::*;

    fn meta(x0: f64, y0: f64, w: u32, h: u32, gsd: f64, crs: Crs) -> RasterMeta<f64> {
        RasterMeta::new(w, h, Affine::north_up(x0, y0, gsd, gsd), crs, 3, 8).unwrap()
    }

    const UTM36S: Crs = Crs::Utm { zone: 36, south: true };

    #[test]
    fn working_crs_selection() {
        let m = meta(500_000.0, 9_000_000.0, 10, 10, 0.05, UTM36S);
        assert_eq!(choose_working_crs(&m).unwrap(), UTM36S);
        let g = meta(39.2 - 0.0005, -6.8 + 0.0005, 100, 100, 0.00001, Crs::Geographic);
        assert_eq!(choose_working_crs(&g).unwrap(), Crs::Utm { zone: 37, south: true });
        let o = meta(0.0005, 0.0015, 100, 100, 0.00001, Crs::Geographic);
        assert_eq!(choose_working_crs(&o).unwrap(), Crs::Utm { zone: 31, south: false });
    }

    #[test]
    fn square_footprint_count() {
        let m = meta(500_000.0, 9_000_500.0, 1000, 1000, 0.5, UTM36S);
        let g = make_grid(&m, &GridSpec::default()).unwrap();
        assert_eq!(g.len(), 10_000);
        assert_eq!((g.n_rows, g.n_cols), (100, 100));
        assert!(g.tiles.iter().all(|t| t.pixel_window.width == 10 && t.pixel_window.height == 10));
    }

    /// Brute-force oracle: a lattice cell is full when all four corners lie in
    /// the closed footprint and partial when any of a 10x10 set of interior
    /// sample points lies strictly inside it.
    fn oracle_counts(fp: Rect<f64>, s: f64) -> (usize, usize) {
        let inside_closed = |x: f64, y: f64| x >= fp.min_x && x <= fp.max_x && y >= fp.min_y && y <= fp.max_y;
        let inside_open = |x: f64, y: f64| x > fp.min_x && x < fp.max_x && y > fp.min_y && y < fp.max_y;
        let (mut full, mut any) = (0, 0);
        for i in -50..50_i64 {
            for j in -50..50_i64 {
                let (x0, y0) = (i as f64 * s, j as f64 * s);
                let corners = [(x0, y0), (x0 + s, y0), (x0, y0 + s), (x0 + s, y0 + s)];
                if corners.iter().all(|&(x, y)| inside_closed(x, y)) {
                    full += 1;
                }
                let hit = (0..10).any(|a| {
                    (0..10).any(|b| {
                        inside_open(x0 + (a as f64 + 0.5) * s / 10.0, y0 + (b as f64 + 0.5) * s / 10.0)
                    })
                });
                if hit {
                    any += 1;
                }
            }
        }
        (full, any)
    }

    #[test]
    fn partial_column_handling() {
        // 52 m x 50 m at 0.1 m/px, anchored on the lattice.
        let m = meta(0.0, 50.0, 520, 500, 0.1, Crs::from_epsg(32631));
        let (full, any) = oracle_counts(m.bounds(), 5.0);
        assert_eq!((full, any), (100, 110));
        let g = make_grid(&m, &GridSpec::default()).unwrap();
        assert_eq!(g.len(), full);
        let gp = make_grid(
            &m,
            &GridSpec {
                include_partials: true,
                ..GridSpec::default()
            },
        )
        .unwrap();
        assert_eq!(gp.len(), any);
        let partial: Vec<_> = gp.tiles.iter().filter(|t| t.valid_fraction < 1.0).collect();
        assert_eq!(partial.len(), 10);
        for t in partial {
            assert!((t.valid_fraction - 0.4).abs() < 1e-9);
            assert_eq!(t.tile_id.col, 10);
            assert_eq!(t.pixel_window.width, 20);
        }
    }

    /// Counts pixels whose footprint interior overlaps the tile interior.
    fn oracle_window(tile: Rect<f64>, m: &RasterMeta<f64>) -> (u32, u32) {
        let (mut cols, mut rows) = (0, 0);
        for c in 0..m.width_px {
            let x0 = m.transform.c + c as f64 * m.transform.a;
            if x0 < tile.max_x && x0 + m.transform.a > tile.min_x {
                cols += 1;
            }
        }
        for r in 0..m.height_px {
            let y1 = m.transform.f + r as f64 * m.transform.e;
            if y1 > tile.min_y && y1 + m.transform.e < tile.max_y {
                rows += 1;
            }
        }
        (rows, cols)
    }

    #[test]
    fn window_sizes() {
        let m = meta(0.0, 10.0, 200, 200, 0.05, UTM36S);
        let tile = Rect::new(0.0, 5.0, 5.0, 10.0);
        let w = tile_to_window(&tile, &UTM36S, &m).unwrap();
        assert_eq!((w.height, w.width), (100, 100));
        assert_eq!((w.height, w.width), oracle_window(tile, &m));

        let m = meta(0.0, 10.0, 300, 300, 0.0352, UTM36S);
        let w = tile_to_window(&tile, &UTM36S, &m).unwrap();
        assert_eq!((w.height, w.width), (143, 143));
        assert_eq!((w.height, w.width), oracle_window(tile, &m));

        let outside = Rect::new(100.0, 100.0, 105.0, 105.0);
        assert!(matches!(tile_to_window(&outside, &UTM36S, &m), Err(Error::EmptyWindow)));
    }

    #[test]
    fn non_metric_working_crs_is_config_error() {
        let m = meta(0.0, 10.0, 200, 200, 0.05, UTM36S);
        let spec = GridSpec {
            working_crs: Some(Crs::Geographic),
            ..GridSpec::default()
        };
        assert!(matches!(make_grid(&m, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_footprint_gives_empty_grid() {
        let m = meta(1.0, 4.0, 30, 30, 0.1, UTM36S);
        assert!(make_grid(&m, &GridSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn geographic_raster_is_gridded_in_utm() {
        // About 110 m square near Dar es Salaam at ~0.11 m/px.
        let m = meta(39.2, -6.8, 1000, 1000, 0.000001, Crs::Geographic);
        let g = make_grid(&m, &GridSpec::default()).unwrap();
        assert_eq!(g.working_crs, Crs::Utm { zone: 37, south: true });
        assert!(g.len() > 400, "{}", g.len());
        for t in &g.tiles {
            assert!(m.contains_window(&t.pixel_window));
            for c in t.bounds.corners() {
                let ll = g.working_crs.to_geographic(c).unwrap();
                assert!(ll.x >= 39.2 && ll.x <= 39.201 && ll.y <= -6.8 && ll.y >= -6.801);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_geojson() {
        let m = meta(500_003.0, 9_000_052.0, 520, 500, 0.1, UTM36S);
        let g = make_grid(
            &m,
            &GridSpec {
                include_partials: true,
                ..GridSpec::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        write_grid_csv(&g, &p).unwrap();
        let back: Grid<f64> = read_grid_csv(&p).unwrap();
        assert_eq!(back, g);

        let gj = dir.path().join("grid.geojson");
        write_grid_geojson(&g, &gj).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&gj).unwrap()).unwrap();
        let feats = v["features"].as_array().unwrap();
        assert_eq!(feats.len(), g.len());
        assert_eq!(feats[0]["properties"]["tile_id"], "0_0");
    }

    #[test]
    fn f32_grid_matches_f64() {
        let m = meta(0.0, 50.0, 520, 500, 0.1, UTM36S);
        let g64 = make_grid(&m, &GridSpec::default()).unwrap();
        let g32 = make_grid(&m.cast::<f32>(), &GridSpec::default()).unwrap();
        let ids = |g: &[TileRecord<f64>]| g.iter().map(|t| (t.tile_id, t.pixel_window)).collect::<Vec<_>>();
        let ids32: Vec<_> = g32.tiles.iter().map(|t| (t.tile_id, t.pixel_window)).collect();
        assert_eq!(ids(&g64.tiles), ids32);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_and_round_trip(
            x0 in -1000.0..1000.0_f64,
            y0 in -1000.0..1000.0_f64,
            w in 20u32..400,
            h in 20u32..400,
            gsd in prop::sample::select(vec![0.05, 0.1, 0.0352, 0.25]),
        ) {
            let m = meta(x0, y0, w, h, gsd, UTM36S);
            let g = make_grid(&m, &GridSpec::default()).unwrap();
            let fp = m.bounds();
            let expected = ((fp.max_x / 5.0 + 1e-9).floor() - (fp.min_x / 5.0 - 1e-9).ceil()).max(0.0)
                * ((fp.max_y / 5.0 + 1e-9).floor() - (fp.min_y / 5.0 - 1e-9).ceil()).max(0.0);
            prop_assert_eq!(g.len() as f64, expected);
            for (k, a) in g.tiles.iter().enumerate() {
                prop_assert!(fp.contains_rect(&a.bounds, 1e-9));
                prop_assert!((a.bounds.width() - 5.0).abs() < 1e-9);
                prop_assert_eq!(g.bounds_of(a.tile_id), a.bounds);
                prop_assert_eq!(g.locate(a.bounds.center()), Some(a.tile_id));
                prop_assert!(m.contains_window(&a.pixel_window));
                for b in &g.tiles[k + 1..] {
                    prop_assert!(!a.bounds.interiors_intersect(&b.bounds));
                }
            }
            let again = make_grid(&m, &GridSpec::default()).unwrap();
            prop_assert_eq!(again, g);
        }
    }
}
