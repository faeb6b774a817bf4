use std::path::PathBuf;

use thiserror::Error;

use crate::geogrid::{PixelWindow, TileId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("tile does not intersect the raster footprint")]
    EmptyWindow,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("raster read failed for window {window}: {message}")]
    RasterRead { window: PixelWindow, message: String },

    #[error("unsupported raster: {0}")]
    UnsupportedRaster(String),

    #[error("parse error in {context}: field `{field}`: {message}")]
    Parse {
        context: String,
        field: String,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("conflicting labels for {region_id} tile {tile}")]
    LabelConflict { region_id: String, tile: TileId },

    #[error("join error: {0}")]
    Join(String),

    #[error("tile {0} has no valid pixels")]
    EmptyTile(TileId),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("sample size too small: need at least {needed}, have {actual}")]
    SampleSize { needed: usize, actual: usize },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("model contract violated: expected {expected}, found {found}")]
    ModelContract { expected: String, found: String },

    #[error("model parse error: {0}")]
    ModelParse(String),

    #[error("backend failed on tiles {first}..={last}: {message}")]
    Backend {
        first: TileId,
        last: TileId,
        message: String,
    },

    #[error("retriable ingest error: {0}")]
    Retriable(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("tile {tile}: {source}")]
    AtTile {
        tile: TileId,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        context: impl Into<String>,
        field: impl Into<String>,
        message: impl ToString,
    ) -> Self {
        Error::Parse {
            context: context.into(),
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn at_tile(self, tile: TileId) -> Self {
        match self {
            e @ Error::AtTile { .. } => e,
            e => Error::AtTile {
                tile,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Backend { .. } | Error::ModelContract { .. } | Error::ModelParse(_) => 4,
            Error::AtTile { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

impl From<tiff::TiffError> for Error {
    fn from(e: tiff::TiffError) -> Self {
        match e {
            tiff::TiffError::IoError(io) => Error::io("<tiff>", io),
            other => Error::UnsupportedRaster(other.to_string()),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let field = e
            .position()
            .map(|p| format!("line {}", p.line()))
            .unwrap_or_else(|| "record".to_string());
        Error::parse("csv", field, e)
    }
}
