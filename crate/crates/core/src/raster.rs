//! GeoTIFF access: metadata (extent, CRS, GSD, bands), windowed pixel reads
//! over stripped or tiled layouts, and an uncompressed writer used for
//! fixtures and indicator layers.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tiff::decoder::{ChunkType, Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::crs::Crs;
use crate::error::{Error, Result};
use crate::geom::{Affine, Point, Polygon, Rect};
use crate::scalar::Scalar;

const GEOKEY_MODEL_TYPE: u16 = 1024;
const GEOKEY_RASTER_TYPE: u16 = 1025;
const GEOKEY_GEOGRAPHIC_TYPE: u16 = 2048;
const GEOKEY_PROJECTED_TYPE: u16 = 3072;
const GEOKEY_PROJ_LINEAR_UNITS: u16 = 3076;
const RASTER_PIXEL_IS_POINT: u16 = 2;
const LINEAR_UNIT_METRE: u16 = 9001;
const USER_DEFINED: u16 = 32767;

/// Rectangular pixel region: offsets and size in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelWindow {
    pub row_off: u32,
    pub col_off: u32,
    pub height: u32,
    pub width: u32,
}

impl PixelWindow {
    pub fn new(row_off: u32, col_off: u32, height: u32, width: u32) -> Self {
        PixelWindow {
            row_off,
            col_off,
            height,
            width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn row_end(&self) -> u32 {
        self.row_off + self.height
    }

    pub fn col_end(&self) -> u32 {
        self.col_off + self.width
    }
}

impl fmt::Display for PixelWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rows {}..{}, cols {}..{}",
            self.row_off,
            self.row_end(),
            self.col_off,
            self.col_end()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Unsigned,
    Signed,
    Float,
}

/// Georeferenced raster metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta<T> {
    pub width_px: u32,
    pub height_px: u32,
    pub transform: Affine<T>,
    pub crs: Crs,
    /// Ground sampling distance in metres per pixel, measured in a metric CRS.
    pub gsd_m: T,
    pub band_count: u16,
    pub bit_depth: u8,
    pub sample_kind: SampleKind,
    pub nodata: Option<f64>,
}

impl<T: Scalar> RasterMeta<T> {
    pub fn new(
        width_px: u32,
        height_px: u32,
        transform: Affine<T>,
        crs: Crs,
        band_count: u16,
        bit_depth: u8,
    ) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::Geometry("raster has zero extent".into()));
        }
        transform.inverse()?;
        let gsd_m = measure_gsd(width_px, height_px, &transform, &crs)?;
        Ok(RasterMeta {
            width_px,
            height_px,
            transform,
            crs,
            gsd_m,
            band_count,
            bit_depth,
            sample_kind: SampleKind::Unsigned,
            nodata: None,
        })
    }

    pub fn with_nodata(mut self, nodata: Option<f64>) -> Self {
        self.nodata = nodata;
        self
    }

    /// Footprint polygon in the raster's own CRS (pixel-edge outline).
    pub fn footprint(&self) -> Polygon<T> {
        let (w, h) = (T::from(self.width_px).unwrap(), T::from(self.height_px).unwrap());
        Polygon::new(vec![
            self.transform.apply(T::zero(), T::zero()),
            self.transform.apply(w, T::zero()),
            self.transform.apply(w, h),
            self.transform.apply(T::zero(), h),
        ])
    }

    pub fn bounds(&self) -> Rect<T> {
        self.footprint().bbox().expect("four corners")
    }

    pub fn center(&self) -> Point<T> {
        let two = T::lit(2.0);
        self.transform.apply(
            T::from(self.width_px).unwrap() / two,
            T::from(self.height_px).unwrap() / two,
        )
    }

    pub fn full_window(&self) -> PixelWindow {
        PixelWindow::new(0, 0, self.height_px, self.width_px)
    }

    pub fn contains_window(&self, w: &PixelWindow) -> bool {
        !w.is_empty() && w.row_end() <= self.height_px && w.col_end() <= self.width_px
    }

    pub fn cast<U: Scalar>(&self) -> RasterMeta<U> {
        RasterMeta {
            width_px: self.width_px,
            height_px: self.height_px,
            transform: self.transform.cast(),
            crs: self.crs,
            gsd_m: U::lit(self.gsd_m.as_f64()),
            band_count: self.band_count,
            bit_depth: self.bit_depth,
            sample_kind: self.sample_kind,
            nodata: self.nodata,
        }
    }
}

fn measure_gsd<T: Scalar>(w: u32, h: u32, t: &Affine<T>, crs: &Crs) -> Result<T> {
    let gsd = if crs.is_metric() {
        t.determinant().abs().sqrt()
    } else {
        // Project one pixel at the raster centre into its local UTM zone.
        let (cx, cy) = (T::from(w / 2).unwrap(), T::from(h / 2).unwrap());
        let p0 = t.apply(cx, cy);
        let g0 = crs.to_geographic(p0)?;
        let utm = Crs::utm_for(g0.x.as_f64(), g0.y.as_f64())?;
        let m = |col: T, row: T| -> Result<Point<T>> {
            crs.transform_to(&utm, t.apply(col, row))
        };
        let (o, px, py) = (m(cx, cy)?, m(cx + T::one(), cy)?, m(cx, cy + T::one())?);
        let (ux, uy) = (px.x - o.x, px.y - o.y);
        let (vx, vy) = (py.x - o.x, py.y - o.y);
        (ux * vy - uy * vx).abs().sqrt()
    };
    if !(gsd > T::zero()) || !gsd.is_finite() {
        return Err(Error::Geometry("ground sampling distance is not positive".into()));
    }
    Ok(gsd)
}

/// Pixel block read from a window: band-interleaved samples plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelBlock {
    pub window: PixelWindow,
    pub bands: u16,
    pub bit_depth: u8,
    /// Row-major, band-interleaved (`(row * width + col) * bands + band`).
    pub samples: Vec<u16>,
    /// `false` for nodata pixels.
    pub valid: Vec<bool>,
}

impl PixelBlock {
    pub fn width(&self) -> usize {
        self.window.width as usize
    }

    pub fn height(&self) -> usize {
        self.window.height as usize
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.valid.len() as f64
        }
    }

    pub fn sample(&self, row: usize, col: usize, band: usize) -> u16 {
        self.samples[(row * self.width() + col) * self.bands as usize + band]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Strips { rows_per_strip: u32 },
    Tiles { tile_w: u32, tile_h: u32, across: u32 },
}

/// An opened GeoTIFF. Cheap to clone; each worker takes its own [`RasterReader`].
#[derive(Debug, Clone)]
pub struct RasterDataset {
    path: PathBuf,
    meta: RasterMeta<f64>,
    layout: Layout,
}

impl RasterDataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut dec = open_decoder(&path)?;
        let (width, height) = dec.dimensions()?;
        let ct = dec.colortype()?;
        let (bands, bit_depth) = match ct {
            ColorType::Gray(b) => (1, b),
            ColorType::GrayA(b) => (2, b),
            ColorType::RGB(b) => (3, b),
            ColorType::RGBA(b) => (4, b),
            ColorType::Multiband {
                bit_depth,
                num_samples,
            } => (num_samples, bit_depth),
            other => {
                return Err(Error::UnsupportedRaster(format!(
                    "{}: colour type {other:?}",
                    path.display()
                )))
            }
        };
        if let Some(planar) = dec.find_tag_unsigned::<u16>(Tag::PlanarConfiguration)? {
            if planar != 1 && bands > 1 {
                return Err(Error::UnsupportedRaster(format!(
                    "{}: band-sequential (planar) layout",
                    path.display()
                )));
            }
        }
        // One SampleFormat value per band; bands are assumed homogeneous.
        let sample_format = match dec.find_tag(Tag::SampleFormat)? {
            Some(v) => v
                .into_u16_vec()
                .map_err(|_| Error::parse("GeoTIFF", "SampleFormat", "not SHORT values"))?
                .first()
                .copied(),
            None => None,
        };
        let sample_kind = match sample_format {
            None | Some(1) => SampleKind::Unsigned,
            Some(2) => SampleKind::Signed,
            Some(3) => SampleKind::Float,
            Some(other) => {
                return Err(Error::UnsupportedRaster(format!("sample format {other}")))
            }
        };
        let layout = match dec.get_chunk_type() {
            ChunkType::Strip => Layout::Strips {
                rows_per_strip: dec.chunk_dimensions().1.max(1),
            },
            ChunkType::Tile => {
                let (tw, th) = dec.chunk_dimensions();
                Layout::Tiles {
                    tile_w: tw,
                    tile_h: th,
                    across: width.div_ceil(tw),
                }
            }
        };
        let geo = read_geo_tags(&mut dec)?;
        let nodata = match dec.find_tag(Tag::GdalNodata)? {
            Some(v) => {
                let s = v.into_string().unwrap_or_default();
                let s = s.trim_matches(char::from(0)).trim();
                Some(s.parse::<f64>().map_err(|_| {
                    Error::parse(path.display().to_string(), "GDAL_NODATA", format!("`{s}`"))
                })?)
            }
            None => None,
        };
        let mut meta = RasterMeta::new(width, height, geo.transform, geo.crs, bands, bit_depth)?
            .with_nodata(nodata);
        meta.sample_kind = sample_kind;
        Ok(RasterDataset { path, meta, layout })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn meta(&self) -> &RasterMeta<f64> {
        &self.meta
    }

    /// Opens an independent decoder with its own chunk cache.
    pub fn reader(&self) -> Result<RasterReader> {
        let capacity = match self.layout {
            Layout::Strips { rows_per_strip } => (256 / rows_per_strip as usize).clamp(4, 256),
            Layout::Tiles { across, .. } => (2 * across as usize).clamp(4, 256),
        };
        Ok(RasterReader {
            decoder: open_decoder(&self.path)?,
            meta: self.meta.clone(),
            layout: self.layout,
            cache: VecDeque::new(),
            capacity,
        })
    }
}

fn open_decoder(path: &Path) -> Result<Decoder<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = Decoder::new(BufReader::new(file))
        .map_err(|e| match e {
            tiff::TiffError::IoError(io) => Error::io(path, io),
            other => Error::UnsupportedRaster(format!("{}: {other}", path.display())),
        })?
        .with_limits(Limits::unlimited());
    Ok(dec)
}

struct GeoTags {
    transform: Affine<f64>,
    crs: Crs,
}

fn read_geo_tags(dec: &mut Decoder<BufReader<File>>) -> Result<GeoTags> {
    let keys = match dec.find_tag(Tag::GeoKeyDirectoryTag)? {
        Some(v) => v
            .into_u16_vec()
            .map_err(|_| Error::parse("GeoTIFF", "GeoKeyDirectory", "not SHORT values"))?,
        None => Vec::new(),
    };
    let mut model_type = None;
    let mut raster_type = None;
    let mut geographic = None;
    let mut projected = None;
    let mut linear_unit = None;
    if keys.len() >= 4 {
        let n = keys[3] as usize;
        for k in 0..n {
            let base = 4 + 4 * k;
            if base + 3 >= keys.len() {
                break;
            }
            let (id, loc, value) = (keys[base], keys[base + 1], keys[base + 3]);
            if loc != 0 {
                continue;
            }
            match id {
                GEOKEY_MODEL_TYPE => model_type = Some(value),
                GEOKEY_RASTER_TYPE => raster_type = Some(value),
                GEOKEY_GEOGRAPHIC_TYPE => geographic = Some(value),
                GEOKEY_PROJECTED_TYPE => projected = Some(value),
                GEOKEY_PROJ_LINEAR_UNITS => linear_unit = Some(value),
                _ => {}
            }
        }
    }
    let crs = match (model_type, projected, geographic) {
        (_, Some(code), _) if code != USER_DEFINED => Crs::from_epsg(u32::from(code)),
        (Some(1), _, _) => Crs::Other {
            code: u32::from(USER_DEFINED),
            metric: linear_unit.map_or(true, |u| u == LINEAR_UNIT_METRE),
        },
        (_, _, Some(code)) if code != USER_DEFINED => Crs::from_epsg(u32::from(code)),
        (Some(2), _, _) => Crs::Geographic,
        _ => return Err(Error::parse("GeoTIFF", "GeoKeyDirectory", "no coordinate reference system")),
    };

    let mut transform = if let Some(m) = dec.find_tag(Tag::ModelTransformationTag)? {
        let m = m
            .into_f64_vec()
            .map_err(|_| Error::parse("GeoTIFF", "ModelTransformation", "not DOUBLE values"))?;
        if m.len() < 8 {
            return Err(Error::parse("GeoTIFF", "ModelTransformation", "fewer than 8 values"));
        }
        Affine {
            a: m[0],
            b: m[1],
            c: m[3],
            d: m[4],
            e: m[5],
            f: m[7],
        }
    } else {
        let scale = dec
            .find_tag(Tag::ModelPixelScaleTag)?
            .ok_or_else(|| Error::parse("GeoTIFF", "ModelPixelScale", "missing"))?
            .into_f64_vec()
            .map_err(|_| Error::parse("GeoTIFF", "ModelPixelScale", "not DOUBLE values"))?;
        let tie = dec
            .find_tag(Tag::ModelTiepointTag)?
            .ok_or_else(|| Error::parse("GeoTIFF", "ModelTiepoint", "missing"))?
            .into_f64_vec()
            .map_err(|_| Error::parse("GeoTIFF", "ModelTiepoint", "not DOUBLE values"))?;
        if scale.len() < 2 || tie.len() < 6 {
            return Err(Error::parse("GeoTIFF", "ModelTiepoint", "too few values"));
        }
        Affine {
            a: scale[0],
            b: 0.0,
            c: tie[3] - tie[0] * scale[0],
            d: 0.0,
            e: -scale[1],
            f: tie[4] + tie[1] * scale[1],
        }
    };
    if raster_type == Some(RASTER_PIXEL_IS_POINT) {
        // Tie point refers to the pixel centre; shift to the corner convention.
        transform.c -= 0.5 * (transform.a + transform.b);
        transform.f -= 0.5 * (transform.d + transform.e);
    }
    Ok(GeoTags { transform, crs })
}

struct ChunkBuf {
    col0: u32,
    row0: u32,
    width: u32,
    height: u32,
    data: DecodingResult,
}

/// Windowed reader over one open file.
pub struct RasterReader {
    decoder: Decoder<BufReader<File>>,
    meta: RasterMeta<f64>,
    layout: Layout,
    cache: VecDeque<(u32, Arc<ChunkBuf>)>,
    capacity: usize,
}

impl RasterReader {
    pub fn meta(&self) -> &RasterMeta<f64> {
        &self.meta
    }

    fn chunk(&mut self, index: u32) -> Result<Arc<ChunkBuf>> {
        if let Some(pos) = self.cache.iter().position(|(i, _)| *i == index) {
            let entry = self.cache.remove(pos).expect("position valid");
            let buf = entry.1.clone();
            self.cache.push_front(entry);
            return Ok(buf);
        }
        let (col0, row0) = match self.layout {
            Layout::Strips { rows_per_strip } => (0, index * rows_per_strip),
            Layout::Tiles {
                tile_w,
                tile_h,
                across,
            } => ((index % across) * tile_w, (index / across) * tile_h),
        };
        let (width, height) = self.decoder.chunk_data_dimensions(index);
        let data = self.decoder.read_chunk(index)?;
        let buf = Arc::new(ChunkBuf {
            col0,
            row0,
            width,
            height,
            data,
        });
        self.cache.push_front((index, buf.clone()));
        self.cache.truncate(self.capacity);
        Ok(buf)
    }

    fn chunks_for(&self, w: &PixelWindow) -> Vec<u32> {
        match self.layout {
            Layout::Strips { rows_per_strip } => {
                (w.row_off / rows_per_strip..=(w.row_end() - 1) / rows_per_strip).collect()
            }
            Layout::Tiles {
                tile_w,
                tile_h,
                across,
            } => {
                let mut out = Vec::new();
                for tr in w.row_off / tile_h..=(w.row_end() - 1) / tile_h {
                    for tc in w.col_off / tile_w..=(w.col_end() - 1) / tile_w {
                        out.push(tr * across + tc);
                    }
                }
                out
            }
        }
    }

    /// Visits every chunk span overlapping the window: `(chunk, src_pixel, dst_pixel, n_pixels)`.
    fn for_each_span(
        &mut self,
        w: &PixelWindow,
        mut f: impl FnMut(&ChunkBuf, usize, usize, usize) -> Result<()>,
    ) -> Result<()> {
        if !self.meta.contains_window(w) {
            return Err(Error::Geometry(format!(
                "window {w} exceeds raster extent {}x{}",
                self.meta.width_px, self.meta.height_px
            )));
        }
        for index in self.chunks_for(w) {
            let chunk = self.chunk(index).map_err(|e| Error::RasterRead {
                window: *w,
                message: e.to_string(),
            })?;
            let c0 = w.col_off.max(chunk.col0);
            let c1 = w.col_end().min(chunk.col0 + chunk.width);
            let r0 = w.row_off.max(chunk.row0);
            let r1 = w.row_end().min(chunk.row0 + chunk.height);
            if c0 >= c1 || r0 >= r1 {
                continue;
            }
            let n = (c1 - c0) as usize;
            for r in r0..r1 {
                let src = (r - chunk.row0) as usize * chunk.width as usize + (c0 - chunk.col0) as usize;
                let dst = (r - w.row_off) as usize * w.width as usize + (c0 - w.col_off) as usize;
                f(&chunk, src, dst, n)?;
            }
        }
        Ok(())
    }

    /// Exact source pixels for an 8- or 16-bit unsigned raster.
    pub fn read_window(&mut self, w: &PixelWindow) -> Result<PixelBlock> {
        let bands = self.meta.band_count as usize;
        let bit_depth = self.meta.bit_depth;
        if self.meta.sample_kind != SampleKind::Unsigned || bit_depth > 16 {
            return Err(Error::UnsupportedRaster(format!(
                "imagery must be 8/16-bit unsigned, found {bit_depth}-bit {:?}",
                self.meta.sample_kind
            )));
        }
        let mut samples = vec![0u16; w.pixel_count() * bands];
        self.for_each_span(w, |chunk, src, dst, n| {
            let out = &mut samples[dst * bands..(dst + n) * bands];
            match &chunk.data {
                DecodingResult::U8(v) => {
                    for (o, s) in out.iter_mut().zip(&v[src * bands..(src + n) * bands]) {
                        *o = u16::from(*s);
                    }
                }
                DecodingResult::U16(v) => out.copy_from_slice(&v[src * bands..(src + n) * bands]),
                _ => return Err(Error::UnsupportedRaster("unexpected sample buffer".into())),
            }
            Ok(())
        })?;
        let colour = bands.min(3);
        let valid = match self.meta.nodata {
            Some(nd) => samples
                .chunks_exact(bands)
                .map(|px| !px[..colour].iter().all(|&s| f64::from(s) == nd))
                .collect(),
            None => vec![true; w.pixel_count()],
        };
        Ok(PixelBlock {
            window: *w,
            bands: bands as u16,
            bit_depth,
            samples,
            valid,
        })
    }

    /// Values of one band as `f64`, any sample type; nodata becomes `None`.
    pub fn read_band_values(&mut self, w: &PixelWindow, band: usize) -> Result<Vec<Option<f64>>> {
        let bands = self.meta.band_count as usize;
        if band >= bands {
            return Err(Error::Config(format!("band {band} out of range (0..{bands})")));
        }
        let nodata = self.meta.nodata;
        let mut out = vec![None; w.pixel_count()];
        self.for_each_span(w, |chunk, src, dst, n| {
            for k in 0..n {
                let i = (src + k) * bands + band;
                let v = match &chunk.data {
                    DecodingResult::U8(v) => f64::from(v[i]),
                    DecodingResult::U16(v) => f64::from(v[i]),
                    DecodingResult::U32(v) => f64::from(v[i]),
                    DecodingResult::U64(v) => v[i] as f64,
                    DecodingResult::I8(v) => f64::from(v[i]),
                    DecodingResult::I16(v) => f64::from(v[i]),
                    DecodingResult::I32(v) => f64::from(v[i]),
                    DecodingResult::I64(v) => v[i] as f64,
                    DecodingResult::F32(v) => f64::from(v[i]),
                    DecodingResult::F64(v) => v[i],
                    _ => return Err(Error::UnsupportedRaster("unsupported sample type".into())),
                };
                let is_nodata = v.is_nan() || nodata.is_some_and(|nd| v == nd);
                out[dst + k] = (!is_nodata).then_some(v);
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Pixel payload for [`write_geotiff`], band-interleaved row-major.
#[derive(Debug, Clone)]
pub enum RasterData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

#[derive(Debug, Clone, Copy)]
pub struct WriteOptions {
    pub rows_per_strip: u32,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions { rows_per_strip: 16 }
    }
}

/// Writes an uncompressed, stripped GeoTIFF. The file appears atomically.
pub fn write_geotiff(
    path: impl AsRef<Path>,
    meta: &RasterMeta<f64>,
    data: &RasterData,
    opts: WriteOptions,
) -> Result<()> {
    let path = path.as_ref();
    let expected = meta.width_px as usize * meta.height_px as usize * meta.band_count as usize;
    let len = match data {
        RasterData::U8(v) => v.len(),
        RasterData::U16(v) => v.len(),
        RasterData::F32(v) => v.len(),
    };
    if len != expected {
        return Err(Error::Validation(format!(
            "raster payload has {len} samples, expected {expected}"
        )));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut enc = TiffEncoder::new(BufWriter::new(tmp.as_file()))?;
        let (w, h) = (meta.width_px, meta.height_px);
        macro_rules! emit {
            ($ct:ty, $buf:expr) => {{
                let mut img = enc.new_image::<$ct>(w, h)?;
                write_geo_tags(img.encoder(), meta)?;
                img.rows_per_strip(opts.rows_per_strip.max(1))?;
                img.write_data($buf)?;
            }};
        }
        match (data, meta.band_count) {
            (RasterData::U8(v), 1) => emit!(colortype::Gray8, v),
            (RasterData::U8(v), 3) => emit!(colortype::RGB8, v),
            (RasterData::U8(v), 4) => emit!(colortype::RGBA8, v),
            (RasterData::U16(v), 1) => emit!(colortype::Gray16, v),
            (RasterData::U16(v), 3) => emit!(colortype::RGB16, v),
            (RasterData::U16(v), 4) => emit!(colortype::RGBA16, v),
            (RasterData::F32(v), 1) => emit!(colortype::Gray32Float, v),
            (_, bands) => {
                return Err(Error::UnsupportedRaster(format!(
                    "writer does not support {bands} bands of this sample type"
                )))
            }
        }
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_geo_tags<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    enc: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    meta: &RasterMeta<f64>,
) -> Result<()> {
    let t = &meta.transform;
    if t.b == 0.0 && t.d == 0.0 {
        enc.write_tag(Tag::ModelPixelScaleTag, &[t.a, -t.e, 0.0][..])?;
        enc.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, t.c, t.f, 0.0][..])?;
    } else {
        let m = [
            t.a, t.b, 0.0, t.c, t.d, t.e, 0.0, t.f, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        enc.write_tag(Tag::ModelTransformationTag, &m[..])?;
    }
    let code = u16::try_from(meta.crs.epsg())
        .map_err(|_| Error::Config(format!("{} cannot be stored as a GeoKey", meta.crs)))?;
    let (model, key) = if meta.crs == Crs::Geographic {
        (2u16, GEOKEY_GEOGRAPHIC_TYPE)
    } else {
        (1u16, GEOKEY_PROJECTED_TYPE)
    };
    let keys: [u16; 16] = [
        1, 1, 0, 3, //
        GEOKEY_MODEL_TYPE, 0, 1, model, //
        GEOKEY_RASTER_TYPE, 0, 1, 1, //
        key, 0, 1, code,
    ];
    enc.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])?;
    if let Some(nd) = meta.nodata {
        enc.write_tag(Tag::GdalNodata, format!("{nd}").as_str())?;
    }
    Ok(())
}
