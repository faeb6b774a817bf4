//! Tile pixel extraction and conversion to fixed-size RGB tensors.

use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geogrid::{PixelWindow, TileId, TileRecord};
use crate::raster::{PixelBlock, RasterDataset, RasterReader};
use crate::scalar::Scalar;

/// Edge length of classifier input tensors.
pub const TENSOR_SIZE: usize = 128;
pub const CHANNELS: usize = 3;

/// `size x size x 3` unsigned 8-bit image, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct TileTensor {
    pub tile_id: TileId,
    pub size: usize,
    pub data: Vec<u8>,
    pub source_window: PixelWindow,
    /// Fraction of non-nodata source pixels.
    pub valid_fraction: f64,
}

impl TileTensor {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(
            path,
            &self.data,
            self.size as u32,
            self.size as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Validation(other.to_string()),
        })
    }
}

/// Exact source pixels of the tile window, nodata flagged.
pub fn extract_tile<T: Scalar>(reader: &mut RasterReader, tile: &TileRecord<T>) -> Result<PixelBlock> {
    let w = tile.pixel_window;
    if !reader.meta().contains_window(&w) {
        return Err(Error::Geometry(format!(
            "window {w} exceeds raster extent {}x{}",
            reader.meta().width_px,
            reader.meta().height_px
        )));
    }
    reader.read_window(&w)
}

/// Converts a block to a [`TENSOR_SIZE`] tensor.
pub fn to_tensor(block: &PixelBlock, tile_id: TileId) -> Result<TileTensor> {
    to_tensor_sized(block, tile_id, TENSOR_SIZE)
}

/// Band selection, optional per-channel min-max scaling (sources deeper than
/// 8 bits), nodata fill with 0, then bilinear resize with half-pixel centres.
pub fn to_tensor_sized(block: &PixelBlock, tile_id: TileId, size: usize) -> Result<TileTensor> {
    if size == 0 {
        return Err(Error::Config("tensor size must be at least 1".into()));
    }
    let (h, w) = (block.height(), block.width());
    if block.valid_count() == 0 {
        return Err(Error::EmptyTile(tile_id));
    }
    let bands = block.bands as usize;
    if bands == 0 {
        return Err(Error::UnsupportedRaster("raster has no bands".into()));
    }
    // Gray (1 band) and gray+alpha (2 bands) replicate band 0.
    let src_band = |c: usize| if bands >= 3 { c } else { 0 };

    let mut planes = vec![vec![0f64; h * w]; CHANNELS];
    for (c, plane) in planes.iter_mut().enumerate() {
        let b = src_band(c);
        let value = |i: usize| f64::from(block.samples[i * bands + b]);
        if block.bit_depth <= 8 {
            for (i, v) in plane.iter_mut().enumerate() {
                if block.valid[i] {
                    *v = value(i);
                }
            }
        } else {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in (0..h * w).filter(|&i| block.valid[i]) {
                lo = lo.min(value(i));
                hi = hi.max(value(i));
            }
            let span = hi - lo;
            for (i, v) in plane.iter_mut().enumerate() {
                if block.valid[i] && span > 0.0 {
                    *v = (value(i) - lo) / span * 255.0;
                }
            }
        }
    }

    // Horizontal pass into channel-interleaved rows, then a vertical pass
    // over whole rows so the inner loop is a straight zip.
    let xs = bilinear_taps(w, size);
    let ys = bilinear_taps(h, size);
    let row_len = size * CHANNELS;
    let mut tmp = vec![0f32; h * row_len];
    for r in 0..h {
        let out = &mut tmp[r * row_len..(r + 1) * row_len];
        for (c, plane) in planes.iter().enumerate() {
            let src = &plane[r * w..(r + 1) * w];
            for (x, &(i0, i1, t)) in xs.iter().enumerate() {
                out[x * CHANNELS + c] = (src[i0] * (1.0 - t) + src[i1] * t) as f32;
            }
        }
    }
    let mut data = Vec::with_capacity(size * row_len);
    for &(j0, j1, t) in &ys {
        let (w0, w1) = (1.0 - t as f32, t as f32);
        let a = &tmp[j0 * row_len..(j0 + 1) * row_len];
        let b = &tmp[j1 * row_len..(j1 + 1) * row_len];
        data.extend(a.iter().zip(b).map(|(&p, &q)| {
            let v = p * w0 + q * w1 + 0.5;
            // SAFETY: a convex mix of values in [0, 255] plus 0.5 is finite and
            // inside i32, so truncation is defined; it rounds half away from
            // zero. The unchecked form lets the loop vectorize.
            unsafe { v.to_int_unchecked::<i32>() as u8 }
        }));
    }
    Ok(TileTensor {
        tile_id,
        size,
        data,
        source_window: block.window,
        valid_fraction: block.valid_fraction(),
    })
}

/// Source indices and weight for each output sample (align-corners off).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub batch_size: usize,
    pub tensor_size: usize,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            batch_size: 64,
            tensor_size: TENSOR_SIZE,
            workers: None,
        }
    }
}

/// Iterator over tensor batches in tile order. Work proceeds one window of
/// `batch_size * workers` tiles at a time, so memory stays bounded.
pub struct BatchStream<'a, T> {
    raster: &'a RasterDataset,
    tiles: &'a [TileRecord<T>],
    opts: ExtractOptions,
    pool: Option<rayon::ThreadPool>,
    readers: Mutex<Vec<RasterReader>>,
    next_tile: usize,
    pending: std::collections::VecDeque<TileTensor>,
    skipped: Vec<TileId>,
    failed: bool,
}

pub fn extract_batch<'a, T: Scalar>(
    raster: &'a RasterDataset,
    tiles: &'a [TileRecord<T>],
    opts: ExtractOptions,
) -> Result<BatchStream<'a, T>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if opts.tensor_size == 0 {
        return Err(Error::Config("tensor size must be at least 1".into()));
    }
    let pool = match opts.workers {
        Some(0) => return Err(Error::Config("worker count must be at least 1".into())),
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        ),
        None => None,
    };
    Ok(BatchStream {
        raster,
        tiles,
        opts,
        pool,
        readers: Mutex::new(Vec::new()),
        next_tile: 0,
        pending: Default::default(),
        skipped: Vec::new(),
        failed: false,
    })
}

impl<T: Scalar> BatchStream<'_, T> {
    /// Tiles without any valid pixel seen so far.
    pub fn skipped(&self) -> &[TileId] {
        &self.skipped
    }

    fn workers(&self) -> usize {
        self.pool
            .as_ref()
            .map_or_else(rayon::current_num_threads, |p| p.current_num_threads())
    }

    fn convert_one(&self, tile: &TileRecord<T>) -> Result<Option<TileTensor>> {
        let reader = self.readers.lock().expect("reader pool").pop();
        let mut reader = match reader {
            Some(r) => r,
            None => self.raster.reader()?,
        };
        let out = extract_tile(&mut reader, tile).and_then(|block| {
            match to_tensor_sized(&block, tile.tile_id, self.opts.tensor_size) {
                Ok(t) => Ok(Some(t)),
                Err(Error::EmptyTile(_)) => Ok(None),
                Err(e) => Err(e),
            }
        });
        self.readers.lock().expect("reader pool").push(reader);
        out.map_err(|e| e.at_tile(tile.tile_id))
    }

    fn fill(&mut self) -> Result<()> {
        let step = self.opts.batch_size * self.workers();
        while self.pending.len() < self.opts.batch_size && self.next_tile < self.tiles.len() {
            let end = (self.next_tile + step).min(self.tiles.len());
            let chunk = &self.tiles[self.next_tile..end];
            let this = &*self;
            let run = || chunk.par_iter().map(|t| this.convert_one(t)).collect::<Vec<_>>();
            let results = match &self.pool {
                Some(p) => p.install(run),
                None => run(),
            };
            self.next_tile = end;
            for (tile, r) in chunk.iter().zip(results) {
                match r? {
                    Some(t) => self.pending.push_back(t),
                    None => self.skipped.push(tile.tile_id),
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Iterator for BatchStream<'_, T> {
    type Item = Result<Vec<TileTensor>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if let Err(e) = self.fill() {
            self.failed = true;
            return Some(Err(e));
        }
        if self.pending.is_empty() {
            return None;
        }
        let n = self.opts.batch_size.min(self.pending.len());
        Some(Ok(self.pending.drain(..n).collect()))
    }
}
