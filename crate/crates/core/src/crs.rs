//! Coordinate reference systems handled natively: WGS84 geographic, the UTM
//! zones on WGS84, and spherical Web Mercator.
//!
//! The transverse Mercator projection uses the Krüger series to sixth order in
//! the third flattening, which is accurate to a few nanometres within a zone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::scalar::Scalar;

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const UTM_K0: f64 = 0.9996;
const UTM_FALSE_EASTING: f64 = 500_000.0;
const UTM_FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Crs {
    /// EPSG:4326, coordinates are (lon, lat) in degrees.
    Geographic,
    /// EPSG:326zz (north) / EPSG:327zz (south).
    Utm { zone: u8, south: bool },
    /// EPSG:3857.
    WebMercator,
    /// Any other EPSG code; only identity transforms are available.
    Other { code: u32, metric: bool },
}

impl Crs {
    pub fn from_epsg(code: u32) -> Self {
        match code {
            4326 => Crs::Geographic,
            3857 | 900_913 => Crs::WebMercator,
            32601..=32660 => Crs::Utm {
                zone: (code - 32600) as u8,
                south: false,
            },
            32701..=32760 => Crs::Utm {
                zone: (code - 32700) as u8,
                south: true,
            },
            // Geographic 2D codes are 4000..4999; treat everything else projected as metric.
            c if (4000..5000).contains(&c) => Crs::Other {
                code: c,
                metric: false,
            },
            c => Crs::Other {
                code: c,
                metric: true,
            },
        }
    }

    pub fn epsg(&self) -> u32 {
        match *self {
            Crs::Geographic => 4326,
            Crs::WebMercator => 3857,
            Crs::Utm { zone, south } => (if south { 32700 } else { 32600 }) + u32::from(zone),
            Crs::Other { code, .. } => code,
        }
    }

    /// Linear unit is the metre.
    pub fn is_metric(&self) -> bool {
        match *self {
            Crs::Geographic => false,
            Crs::Utm { .. } | Crs::WebMercator => true,
            Crs::Other { metric, .. } => metric,
        }
    }

    /// Whether coordinates can be converted to and from WGS84 lon/lat.
    pub fn is_supported(&self) -> bool {
        !matches!(self, Crs::Other { .. })
    }

    /// UTM zone containing a lon/lat position (standard 6° zones).
    pub fn utm_for(lon: f64, lat: f64) -> Result<Crs> {
        if !(lon.is_finite() && lat.is_finite()) || lat.abs() > 90.0 {
            return Err(Error::Geometry(format!("invalid position ({lon}, {lat})")));
        }
        let lon = ((lon + 180.0).rem_euclid(360.0)) - 180.0;
        let zone = ((lon / 6.0).floor() as i32 + 31).clamp(1, 60) as u8;
        Ok(Crs::Utm {
            zone,
            south: lat < 0.0,
        })
    }

    /// Converts a point in this CRS to WGS84 (lon, lat).
    pub fn to_geographic<T: Scalar>(&self, p: Point<T>) -> Result<Point<T>> {
        match *self {
            Crs::Geographic => Ok(p),
            Crs::Utm { zone, south } => Ok(utm_inverse(p, zone, south)),
            Crs::WebMercator => Ok(web_mercator_inverse(p)),
            Crs::Other { code, .. } => Err(Error::Config(format!(
                "no transform from EPSG:{code} to geographic coordinates"
            ))),
        }
    }

    /// Converts a WGS84 (lon, lat) point into this CRS.
    pub fn from_geographic<T: Scalar>(&self, p: Point<T>) -> Result<Point<T>> {
        match *self {
            Crs::Geographic => Ok(p),
            Crs::Utm { zone, south } => Ok(utm_forward(p, zone, south)),
            Crs::WebMercator => Ok(web_mercator_forward(p)),
            Crs::Other { code, .. } => Err(Error::Config(format!(
                "no transform from geographic coordinates to EPSG:{code}"
            ))),
        }
    }

    /// Point transform between two CRSs, via WGS84 when they differ.
    pub fn transform_to<T: Scalar>(&self, target: &Crs, p: Point<T>) -> Result<Point<T>> {
        if self == target {
            return Ok(p);
        }
        target.from_geographic(self.to_geographic(p)?)
    }
}

impl fmt::Display for Crs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EPSG:{}", self.epsg())
    }
}

impl FromStr for Crs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t
            .strip_prefix("EPSG:")
            .or_else(|| t.strip_prefix("epsg:"))
            .unwrap_or(t);
        digits
            .parse::<u32>()
            .map(Crs::from_epsg)
            .map_err(|_| Error::parse("crs", "crs", format!("expected EPSG:<code>, got `{s}`")))
    }
}

impl From<Crs> for String {
    fn from(c: Crs) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Crs {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

struct TmSeries {
    /// Rectifying radius scaled by k0.
    k0_a: f64,
    e: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

fn tm_series() -> TmSeries {
    let n = WGS84_F / (2.0 - WGS84_F);
    let (n2, n3, n4, n5, n6) = (n * n, n.powi(3), n.powi(4), n.powi(5), n.powi(6));
    let big_a = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let alpha = [
        n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
            + 7891.0 * n6 / 37800.0,
        13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
            - 1_983_433.0 * n6 / 1_935_360.0,
        61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0
            + 167_603.0 * n6 / 181_440.0,
        49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
        34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
        212_378_941.0 * n6 / 319_334_400.0,
    ];
    let beta = [
        n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
            + 96199.0 * n6 / 604_800.0,
        n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
            - 1_118_711.0 * n6 / 3_870_720.0,
        17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
        4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
        4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
        20_648_693.0 * n6 / 638_668_800.0,
    ];
    TmSeries {
        k0_a: UTM_K0 * big_a,
        e: (WGS84_F * (2.0 - WGS84_F)).sqrt(),
        alpha,
        beta,
    }
}

fn central_meridian(zone: u8) -> f64 {
    f64::from(zone) * 6.0 - 183.0
}

/// Conformal latitude tangent from geodetic latitude tangent.
fn tau_prime(tau: f64, e: f64) -> f64 {
    let tau1 = tau.hypot(1.0);
    let sig = (e * (e * tau / tau1).atanh()).sinh();
    tau * sig.hypot(1.0) - sig * tau1
}

fn utm_forward<T: Scalar>(p: Point<T>, zone: u8, south: bool) -> Point<T> {
    let s = tm_series();
    let lon = p.x.as_f64();
    let lat = p.y.as_f64().to_radians();
    let dlon = (lon - central_meridian(zone)).to_radians();

    let tp = tau_prime(lat.tan(), s.e);
    let xi_p = tp.atan2(dlon.cos());
    let eta_p = (dlon.sin() / tp.hypot(dlon.cos())).asinh();

    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }
    let easting = UTM_FALSE_EASTING + s.k0_a * eta;
    let northing = s.k0_a * xi + if south { UTM_FALSE_NORTHING_SOUTH } else { 0.0 };
    Point::new(T::lit(easting), T::lit(northing))
}

fn utm_inverse<T: Scalar>(p: Point<T>, zone: u8, south: bool) -> Point<T> {
    let s = tm_series();
    let northing = p.y.as_f64() - if south { UTM_FALSE_NORTHING_SOUTH } else { 0.0 };
    let xi = northing / s.k0_a;
    let eta = (p.x.as_f64() - UTM_FALSE_EASTING) / s.k0_a;

    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }
    let tp = xi_p.sin() / eta_p.sinh().hypot(xi_p.cos());
    let dlon = eta_p.sinh().atan2(xi_p.cos());

    // Newton iteration for tau given tau' (Karney 2011).
    let e2m = 1.0 - s.e * s.e;
    let mut tau = tp;
    for _ in 0..8 {
        let tp_i = tau_prime(tau, s.e);
        let dtau = (tp - tp_i) / tp_i.hypot(1.0) * (1.0 + e2m * tau * tau)
            / (e2m * tau.hypot(1.0));
        tau += dtau;
        if dtau.abs() < 1e-15 * tau.abs().max(1.0) {
            break;
        }
    }
    let lat = tau.atan().to_degrees();
    let lon = central_meridian(zone) + dlon.to_degrees();
    Point::new(T::lit(lon), T::lit(lat))
}

const MERC_R: f64 = 6_378_137.0;

fn web_mercator_forward<T: Scalar>(p: Point<T>) -> Point<T> {
    let lon = p.x.as_f64().to_radians();
    let lat = p.y.as_f64().to_radians();
    let x = MERC_R * lon;
    let y = MERC_R * (std::f64::consts::FRAC_PI_4 + lat / 2.0).tan().ln();
    Point::new(T::lit(x), T::lit(y))
}

fn web_mercator_inverse<T: Scalar>(p: Point<T>) -> Point<T> {
    let lon = (p.x.as_f64() / MERC_R).to_degrees();
    let lat = (2.0 * (p.y.as_f64() / MERC_R).exp().atan() - std::f64::consts::FRAC_PI_2).to_degrees();
    Point::new(T::lit(lon), T::lit(lat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference values computed with PROJ 9 (pyproj), EPSG:4326 -> EPSG:326zz/327zz.
    const PROJ_REFERENCE: &[(u8, bool, f64, f64, f64, f64)] = &[
        (37, true, 39.2, -6.8, 522_099.521_012_232_9, 9_248_355.780_884_244),
        (31, false, 3.0, 0.0, 500_000.0, 0.0),
        (31, false, 0.001, 0.001, 166_132.871_781_905_53, 110.682_654_080_064_13),
        (34, true, 18.42406, -33.92487, 261_877.816_392_025_68, 6_243_185.589_229_039),
        (36, true, 32.58, -0.31, 453_264.773_674_252_27, 9_965_734.755_552_722),
        (29, false, -10.8, 6.3, 300_874.447_946_520_93, 696_710.722_448_847_7),
    ];

    #[test]
    fn forward_matches_proj() {
        for &(zone, south, lon, lat, e, n) in PROJ_REFERENCE {
            let p = utm_forward(Point::new(lon, lat), zone, south);
            assert!((p.x - e).abs() < 1e-6, "zone {zone}: easting {} vs {e}", p.x);
            assert!((p.y - n).abs() < 1e-6, "zone {zone}: northing {} vs {n}", p.y);
        }
    }

    #[test]
    fn inverse_matches_proj() {
        for &(zone, south, lon, lat, e, n) in PROJ_REFERENCE {
            let p = utm_inverse(Point::new(e, n), zone, south);
            assert!((p.x - lon).abs() < 1e-10 && (p.y - lat).abs() < 1e-10, "{p:?}");
        }
    }

    #[test]
    fn zone_selection() {
        assert_eq!(
            Crs::utm_for(39.2, -6.8).unwrap(),
            Crs::Utm {
                zone: 37,
                south: true
            }
        );
        assert_eq!(
            Crs::utm_for(0.001, 0.001).unwrap(),
            Crs::Utm {
                zone: 31,
                south: false
            }
        );
        assert_eq!(Crs::utm_for(180.0, 10.0).unwrap().epsg(), 32601);
        assert_eq!(Crs::utm_for(-180.0, 10.0).unwrap().epsg(), 32601);
        assert!(Crs::utm_for(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn epsg_round_trip_and_parse() {
        for code in [4326, 3857, 32737, 32631, 2056] {
            assert_eq!(Crs::from_epsg(code).epsg(), code);
        }
        assert_eq!("EPSG:32737".parse::<Crs>().unwrap().epsg(), 32737);
        assert!(!Crs::Geographic.is_metric());
        assert!("EPSG:abc".parse::<Crs>().is_err());
    }

    #[test]
    fn web_mercator_known_point() {
        let p = web_mercator_forward(Point::new(180.0_f64, 0.0));
        assert!((p.x - 20_037_508.342_789_244).abs() < 1e-6);
        let back = web_mercator_inverse(web_mercator_forward(Point::new(39.2_f64, -6.8)));
        assert!((back.x - 39.2).abs() < 1e-12 && (back.y + 6.8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn utm_round_trip(lon_off in -3.0f64..3.0, lat in -80.0f64..84.0, zone in 1u8..=60) {
            let lon = central_meridian(zone) + lon_off;
            let south = lat < 0.0;
            let fwd = utm_forward(Point::new(lon, lat), zone, south);
            let back = utm_inverse(fwd, zone, south);
            prop_assert!((back.x - lon).abs() < 1e-9);
            prop_assert!((back.y - lat).abs() < 1e-9);
        }
    }
}
