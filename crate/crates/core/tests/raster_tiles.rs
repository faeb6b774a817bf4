use std::path::Path;

use dumpscan_core::geogrid::{self, PixelWindow, TileId};
use dumpscan_core::geom::Affine;
use dumpscan_core::raster::{write_geotiff, RasterData, RasterDataset, RasterMeta, WriteOptions};
use dumpscan_core::tiles::{extract_batch, ExtractOptions, TileTensor};
use dumpscan_core::{Crs, Grid, GridSpec};

const UTM36S: Crs = Crs::Utm { zone: 36, south: true };

fn pattern(r: u32, c: u32) -> [u8; 3] {
    [((r * 7 + c * 3) % 256) as u8, ((r + c) % 256) as u8, ((c * 11 + 5) % 256) as u8]
}

fn le16(v: u16) -> [u8; 2] {
    v.to_le_bytes()
}

/// Writes a little-endian tiled RGB8 GeoTIFF by hand, so the tiled read path
/// is exercised independently of the crate's (stripped) writer.
fn write_tiled_tiff(path: &Path, width: u32, height: u32, tile: u32, origin: (f64, f64), gsd: f64) {
    let across = width.div_ceil(tile);
    let down = height.div_ceil(tile);
    let n_tiles = (across * down) as usize;
    let tile_bytes = (tile * tile * 3) as usize;

    let mut tiles = Vec::with_capacity(n_tiles);
    for tr in 0..down {
        for tc in 0..across {
            let mut buf = vec![0u8; tile_bytes];
            for y in 0..tile {
                for x in 0..tile {
                    let (r, c) = (tr * tile + y, tc * tile + x);
                    if r < height && c < width {
                        let i = ((y * tile + x) * 3) as usize;
                        buf[i..i + 3].copy_from_slice(&pattern(r, c));
                    }
                }
            }
            tiles.push(buf);
        }
    }

    // Layout: header, IFD, then out-of-line values, then tile data.
    let geokeys: [u16; 16] = [1, 1, 0, 3, 1024, 0, 1, 1, 1025, 0, 1, 1, 3072, 0, 1, 32736];
    let scale = [gsd, gsd, 0.0];
    let tie = [0.0, 0.0, 0.0, origin.0, origin.1, 0.0];
    let n_entries: u16 = 14;
    let ifd_off = 8u32;
    let extra_off = ifd_off + 2 + 12 * u32::from(n_entries) + 4;
    let mut extra = Vec::new();
    let mut put = |bytes: &[u8]| {
        let off = extra_off + extra.len() as u32;
        extra.extend_from_slice(bytes);
        if extra.len() % 2 == 1 {
            extra.push(0);
        }
        off
    };
    let bps_off = put(&[8, 0, 8, 0, 8, 0]);
    let scale_off = put(&scale.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    let tie_off = put(&tie.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    let keys_off = put(&geokeys.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    let data_start = extra_off + 8 * n_tiles as u32 * 2 + 256 + 8;
    let offsets: Vec<u32> = (0..n_tiles as u32).map(|i| data_start + i * tile_bytes as u32).collect();
    let offsets_off = put(&offsets.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    let counts_off = put(&vec![tile_bytes as u32; n_tiles].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    assert!(extra_off + extra.len() as u32 <= data_start);

    let mut out = Vec::new();
    out.extend_from_slice(b"II*\0");
    out.extend_from_slice(&ifd_off.to_le_bytes());
    out.extend_from_slice(&le16(n_entries));
    let mut entry = |tag: u16, typ: u16, count: u32, value: u32| {
        out.extend_from_slice(&le16(tag));
        out.extend_from_slice(&le16(typ));
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&value.to_le_bytes());
    };
    const SHORT: u16 = 3;
    const LONG: u16 = 4;
    const DOUBLE: u16 = 12;
    entry(256, LONG, 1, width);
    entry(257, LONG, 1, height);
    entry(258, SHORT, 3, bps_off);
    entry(259, SHORT, 1, 1);
    entry(262, SHORT, 1, 2);
    entry(277, SHORT, 1, 3);
    entry(284, SHORT, 1, 1);
    entry(322, SHORT, 1, tile);
    entry(323, SHORT, 1, tile);
    entry(324, LONG, n_tiles as u32, offsets_off);
    entry(325, LONG, n_tiles as u32, counts_off);
    entry(33550, DOUBLE, 3, scale_off);
    entry(33922, DOUBLE, 6, tie_off);
    entry(34735, SHORT, geokeys.len() as u32, keys_off);
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&extra);
    out.resize(data_start as usize, 0);
    for t in &tiles {
        out.extend_from_slice(t);
    }
    std::fs::write(path, out).unwrap();
}

fn write_striped(path: &Path, width: u32, height: u32, origin: (f64, f64), gsd: f64, rows_per_strip: u32) {
    let meta = RasterMeta::new(width, height, Affine::north_up(origin.0, origin.1, gsd, gsd), UTM36S, 3, 8).unwrap();
    let mut data = Vec::with_capacity((width * height * 3) as usize);
    for r in 0..height {
        for c in 0..width {
            data.extend_from_slice(&pattern(r, c));
        }
    }
    write_geotiff(path, &meta, &RasterData::U8(data), WriteOptions { rows_per_strip }).unwrap();
}

#[test]
fn tiled_and_striped_layouts_read_the_same_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h, gsd, origin) = (45u32, 37u32, 0.5, (500_000.0, 9_000_020.0));
    let tiled = dir.path().join("tiled.tif");
    write_tiled_tiff(&tiled, w, h, 16, origin, gsd);
    let striped = dir.path().join("striped.tif");
    write_striped(&striped, w, h, origin, gsd, 5);

    let a = RasterDataset::open(&tiled).unwrap();
    let b = RasterDataset::open(&striped).unwrap();
    assert_eq!(a.meta().crs, UTM36S);
    assert_eq!((a.meta().width_px, a.meta().height_px), (w, h));
    assert_eq!(a.meta().transform, b.meta().transform);
    assert!((a.meta().gsd_m - gsd).abs() < 1e-12);

    let (mut ra, mut rb) = (a.reader().unwrap(), b.reader().unwrap());
    // Windows crossing tile and strip edges, including the ragged last tile.
    for win in [
        PixelWindow::new(0, 0, h, w),
        PixelWindow::new(14, 13, 5, 7),
        PixelWindow::new(30, 40, 7, 5),
        PixelWindow::new(16, 16, 16, 16),
        PixelWindow::new(36, 44, 1, 1),
    ] {
        let ba = ra.read_window(&win).unwrap();
        let bb = rb.read_window(&win).unwrap();
        assert_eq!(ba.samples, bb.samples, "window {win}");
        for y in 0..win.height {
            for x in 0..win.width {
                let px = pattern(win.row_off + y, win.col_off + x);
                for (band, &v) in px.iter().enumerate() {
                    assert_eq!(ba.sample(y as usize, x as usize, band), u16::from(v));
                }
            }
        }
    }
    assert!(ra.read_window(&PixelWindow::new(30, 40, 8, 5)).is_err());
}

fn tensors(raster: &RasterDataset, grid: &Grid, batch_size: usize, workers: usize) -> (Vec<usize>, Vec<TileTensor>, Vec<TileId>) {
    let opts = ExtractOptions {
        batch_size,
        workers: Some(workers),
        ..Default::default()
    };
    let mut stream = extract_batch(raster, &grid.tiles, opts).unwrap();
    let mut sizes = Vec::new();
    let mut all = Vec::new();
    for batch in stream.by_ref() {
        let batch = batch.unwrap();
        sizes.push(batch.len());
        all.extend(batch);
    }
    (sizes, all, stream.skipped().to_vec())
}

#[test]
fn batches_follow_tile_order_and_skip_empty_tiles() {
    let dir = tempfile::tempdir().unwrap();
    // One row of ten 5 m tiles at 0.5 m/px.
    let (w, h) = (100u32, 10u32);
    let meta = RasterMeta::new(w, h, Affine::north_up(500_000.0, 9_000_010.0, 0.5, 0.5), UTM36S, 3, 8)
        .unwrap()
        .with_nodata(Some(0.0));
    let mut data = Vec::new();
    for r in 0..h {
        for c in 0..w {
            // Tile 3 is entirely nodata.
            if (30..40).contains(&c) {
                data.extend_from_slice(&[0, 0, 0]);
            } else {
                data.extend_from_slice(&[10 + (c / 10) as u8, 20 + r as u8, 30]);
            }
        }
    }
    let path = dir.path().join("row.tif");
    write_geotiff(&path, &meta, &RasterData::U8(data), WriteOptions::default()).unwrap();
    let raster = RasterDataset::open(&path).unwrap();
    assert_eq!(raster.meta().nodata, Some(0.0));
    let grid: Grid = geogrid::make_grid(raster.meta(), &GridSpec::default()).unwrap();
    assert_eq!(grid.len(), 10);

    let (sizes, all, skipped) = tensors(&raster, &grid, 4, 1);
    assert_eq!(skipped, vec![TileId::new(0, 3)]);
    assert_eq!(sizes.iter().sum::<usize>(), 9);
    assert!(sizes.iter().all(|&s| s <= 4));
    let order: Vec<u32> = all.iter().map(|t| t.tile_id.col).collect();
    assert_eq!(order, vec![0, 1, 2, 4, 5, 6, 7, 8, 9]);
    for t in &all {
        assert_eq!(t.pixel(64, 64)[0], 10 + t.tile_id.col as u8);
    }

    // Without the empty tile, ten tiles split 4/4/2.
    let full_meta = meta.clone().with_nodata(None);
    let path2 = dir.path().join("full.tif");
    let data2: Vec<u8> = (0..w * h).flat_map(|i| [1 + (i % 200) as u8, 2, 3]).collect();
    write_geotiff(&path2, &full_meta, &RasterData::U8(data2), WriteOptions::default()).unwrap();
    let raster2 = RasterDataset::open(&path2).unwrap();
    let (sizes, _, skipped) = tensors(&raster2, &grid, 4, 1);
    assert_eq!(sizes, vec![4, 4, 2]);
    assert!(skipped.is_empty());
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiled.tif");
    // 60 m x 40 m at 0.25 m/px, tiled 32 px.
    write_tiled_tiff(&path, 240, 160, 32, (500_000.0, 9_000_040.0), 0.25);
    let raster = RasterDataset::open(&path).unwrap();
    let grid: Grid = geogrid::make_grid(raster.meta(), &GridSpec::default()).unwrap();
    assert_eq!(grid.len(), 96);
    let (_, one, _) = tensors(&raster, &grid, 7, 1);
    let (_, four, _) = tensors(&raster, &grid, 7, 4);
    assert_eq!(one.len(), 96);
    assert_eq!(one, four);
}
