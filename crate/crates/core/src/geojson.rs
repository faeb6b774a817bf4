//! Streaming GeoJSON writer with fixed coordinate precision, so repeated
//! exports of the same data are byte-identical.

use std::io::{self, Write};

use crate::crs::Crs;
use crate::error::Result;
use crate::geom::{Point, Rect};
use crate::scalar::Scalar;

/// Decimal places for exported coordinates (about 1 cm in degrees).
pub const COORD_DECIMALS: usize = 7;

pub enum PropValue<'a> {
    Str(&'a str),
    Int(i64),
    Float(f64, usize),
    Null,
}

pub struct FeatureWriter<W: Write> {
    out: W,
    source: Crs,
    reproject: bool,
    first: bool,
}

impl<W: Write> FeatureWriter<W> {
    /// Coordinates are written in WGS84 when `source` can be converted,
    /// otherwise in the source CRS with a `crs` member naming it.
    pub fn begin(mut out: W, source: Crs) -> io::Result<Self> {
        let reproject = source.is_supported();
        if reproject {
            out.write_all(b"{\"type\":\"FeatureCollection\",\"features\":[")?;
        } else {
            write!(
                out,
                "{{\"type\":\"FeatureCollection\",\"crs\":{{\"type\":\"name\",\"properties\":{{\"name\":\"urn:ogc:def:crs:EPSG::{}\"}}}},\"features\":[",
                source.epsg()
            )?;
        }
        Ok(FeatureWriter {
            out,
            source,
            reproject,
            first: true,
        })
    }

    pub fn rect_feature<T: Scalar>(&mut self, rect: &Rect<T>, props: &[(&str, PropValue<'_>)]) -> Result<()> {
        let ring: Vec<Point<f64>> = rect
            .corners()
            .iter()
            .map(|p| Point::new(p.x.as_f64(), p.y.as_f64()))
            .collect();
        self.polygon_feature(&ring, props)
    }

    pub fn polygon_feature(&mut self, ring: &[Point<f64>], props: &[(&str, PropValue<'_>)]) -> Result<()> {
        let mut coords = Vec::with_capacity(ring.len() + 1);
        for p in ring {
            coords.push(if self.reproject {
                self.source.to_geographic(*p)?
            } else {
                *p
            });
        }
        if let Some(first) = coords.first().copied() {
            coords.push(first);
        }
        self.write_feature(&coords, props).map_err(|e| crate::error::Error::io("<geojson>", e))
    }

    fn write_feature(&mut self, coords: &[Point<f64>], props: &[(&str, PropValue<'_>)]) -> io::Result<()> {
        if !self.first {
            self.out.write_all(b",")?;
        }
        self.first = false;
        self.out
            .write_all(b"\n{\"type\":\"Feature\",\"geometry\":{\"type\":\"Polygon\",\"coordinates\":[[")?;
        for (i, p) in coords.iter().enumerate() {
            if i > 0 {
                self.out.write_all(b",")?;
            }
            write!(
                self.out,
                "[{:.prec$},{:.prec$}]",
                p.x,
                p.y,
                prec = COORD_DECIMALS
            )?;
        }
        self.out.write_all(b"]]},\"properties\":{")?;
        for (i, (k, v)) in props.iter().enumerate() {
            if i > 0 {
                self.out.write_all(b",")?;
            }
            write!(self.out, "{}:", serde_json::to_string(k).expect("string"))?;
            match v {
                PropValue::Str(s) => write!(self.out, "{}", serde_json::to_string(s).expect("string"))?,
                PropValue::Int(n) => write!(self.out, "{n}")?,
                PropValue::Float(x, prec) => write!(self.out, "{x:.prec$}", prec = *prec)?,
                PropValue::Null => self.out.write_all(b"null")?,
            }
        }
        self.out.write_all(b"}}")
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.write_all(b"\n]}\n")?;
        self.out.flush()?;
        Ok(self.out)
    }
}
