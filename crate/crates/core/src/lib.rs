//! Tile-based mapping of openly dumped waste in UAV orthomosaics.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the pipeline uses.

pub mod crs;
pub mod error;
pub mod geom;
pub mod raster;
pub mod scalar;

pub mod dataset;
pub mod evalsuite;
pub mod geogrid;
pub mod geojson;
pub mod infer;
pub mod ingest;
pub mod pipeline;
pub mod records;
pub mod sociocorr;
pub mod synthbench;
pub mod tiles;
pub mod wastemap;

pub use crs::Crs;
pub use error::{Error, Result};
pub use records::{Class, PredictionRow, TileKey};
pub use scalar::Scalar;

pub type Point = geom::Point<f64>;
pub type Rect = geom::Rect<f64>;
pub type Polygon = geom::Polygon<f64>;
pub type Affine = geom::Affine<f64>;
pub type RasterMeta = raster::RasterMeta<f64>;
pub type Grid = geogrid::Grid<f64>;
pub type GridSpec = geogrid::GridSpec<f64>;
pub type TileRecord = geogrid::TileRecord<f64>;
pub type RegionSummary = wastemap::RegionSummary<f64>;
pub type CorrelationResult = sociocorr::CorrelationResult<f64>;
pub type BivariateReport = sociocorr::BivariateReport<f64>;
pub type Prf1 = evalsuite::Prf1<f64>;
pub type BootstrapCurve = evalsuite::BootstrapCurve<f64>;
