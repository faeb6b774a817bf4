//! OpenAerialMap catalog search, quality admission and asset download.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, NaiveDate};
use geo::GeodesicArea;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};

pub const DEFAULT_ENDPOINT: &str = "https://api.openaerialmap.org";
const PAGE_LIMIT: usize = 100;
const MAX_PAGES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaSource {
    /// Reported by the catalog.
    Catalog,
    /// Geodesic area of the footprint polygon.
    Footprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub oam_id: String,
    pub title: String,
    pub gsd_m: f64,
    /// Exterior ring, lon/lat.
    pub footprint: Vec<Point<f64>>,
    pub area_km2: f64,
    pub area_source: AreaSource,
    pub acquisition_date: Option<NaiveDate>,
    pub provider: String,
    pub download_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionPolicy {
    pub max_gsd_m: f64,
    pub min_area_km2: f64,
}

impl Default for AdmissionPolicy {
    fn default() -> Self {
        AdmissionPolicy {
            max_gsd_m: 0.06,
            min_area_km2: 1.0,
        }
    }
}

impl AdmissionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_gsd_m > 0.0 && self.min_area_km2 > 0.0) || !self.max_gsd_m.is_finite() || !self.min_area_km2.is_finite() {
            return Err(Error::Config(format!(
                "admission thresholds must be positive (max_gsd_m={}, min_area_km2={})",
                self.max_gsd_m, self.min_area_km2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    Gsd { gsd_m: f64, max_gsd_m: f64 },
    Area { area_km2: f64, min_area_km2: f64 },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::Gsd { gsd_m, max_gsd_m } => write!(f, "gsd {gsd_m} m is not below {max_gsd_m} m"),
            Rejection::Area { area_km2, min_area_km2 } => {
                write!(f, "area {area_km2} km² is not above {min_area_km2} km²")
            }
        }
    }
}

/// Both gates are strict: an entry exactly at a threshold is rejected.
pub fn admit(gsd_m: f64, area_km2: f64, policy: &AdmissionPolicy) -> (bool, Vec<Rejection>) {
    let mut reasons = Vec::new();
    if !(gsd_m < policy.max_gsd_m) {
        reasons.push(Rejection::Gsd {
            gsd_m,
            max_gsd_m: policy.max_gsd_m,
        });
    }
    if !(area_km2 > policy.min_area_km2) {
        reasons.push(Rejection::Area {
            area_km2,
            min_area_km2: policy.min_area_km2,
        });
    }
    (reasons.is_empty(), reasons)
}

pub fn admit_entry(entry: &CatalogEntry, policy: &AdmissionPolicy) -> (bool, Vec<Rejection>) {
    admit(entry.gsd_m, entry.area_km2, policy)
}

/// Validates a `w,s,e,n` lon/lat rectangle.
pub fn parse_bbox(s: &str) -> Result<Rect<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bbox `{s}`: {e}")))?;
    let [w, so, e, n] = v[..] else {
        return Err(Error::Config(format!("bbox `{s}`: expected w,s,e,n")));
    };
    let ok = (-180.0..=180.0).contains(&w)
        && (-180.0..=180.0).contains(&e)
        && (-90.0..=90.0).contains(&so)
        && (-90.0..=90.0).contains(&n)
        && w < e
        && so < n;
    if !ok {
        return Err(Error::Config(format!("bbox `{s}` is not a valid lon/lat rectangle")));
    }
    Ok(Rect::new(w, so, e, n))
}

fn ring_area_km2(ring: &[Point<f64>]) -> f64 {
    let ls = geo::LineString::from(ring.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>());
    geo::Polygon::new(ls, vec![]).geodesic_area_unsigned() / 1e6
}

/// Parses one catalog record. Unknown fields are ignored; missing or
/// malformed required fields are reported by name.
pub fn parse_entry(v: &Value, context: &str) -> Result<CatalogEntry> {
    let field = |name: &str, msg: &str| Error::parse(context, name, msg);
    let oam_id = v["_id"]
        .as_str()
        .or_else(|| v["oam_id"].as_str())
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| field("_id", "missing or empty"))?
        .to_string();
    let ctx = format!("{context} [{oam_id}]");
    let field = |name: &str, msg: &str| Error::parse(&ctx, name, msg);
    let gsd_m = v["gsd"]
        .as_f64()
        .or_else(|| v["gsd_m"].as_f64())
        .ok_or_else(|| field("gsd", "missing or not a number"))?;
    if !(gsd_m > 0.0 && gsd_m.is_finite()) {
        return Err(field("gsd", &format!("{gsd_m} is not positive")));
    }
    let download_url = v["uuid"]
        .as_str()
        .or_else(|| v["download_url"].as_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| field("uuid", "missing download URL"))?
        .to_string();
    let footprint = parse_footprint(&v["geojson"]).map_err(|m| field("geojson", &m))?;
    let (area_km2, area_source) = match v["area_km2"].as_f64() {
        Some(a) => (a, AreaSource::Catalog),
        None => match &footprint {
            Some(ring) => (ring_area_km2(ring), AreaSource::Footprint),
            None => return Err(field("geojson", "no area_km2 and no footprint to measure")),
        },
    };
    if !(area_km2 >= 0.0 && area_km2.is_finite()) {
        return Err(field("area_km2", &format!("{area_km2} is negative")));
    }
    let acquisition_date = match v["acquisition_start"].as_str().or_else(|| v["acquisition_date"].as_str()) {
        None => None,
        Some(s) => Some(
            DateTime::parse_from_rfc3339(s)
                .map(|d| d.date_naive())
                .or_else(|_| NaiveDate::parse_from_str(s, "%Y-%m-%d"))
                .or_else(|_| NaiveDate::parse_from_str(s.get(..10).unwrap_or(s), "%Y-%m-%d"))
                .map_err(|_| field("acquisition_start", &format!("unparseable date `{s}`")))?,
        ),
    };
    let text = |k: &str| v[k].as_str().unwrap_or("").to_string();
    Ok(CatalogEntry {
        title: text("title"),
        gsd_m,
        footprint: footprint.unwrap_or_default(),
        area_km2,
        area_source,
        acquisition_date,
        provider: text("provider"),
        download_url,
        file_size: v["file_size"].as_u64(),
        sha256: v["sha256"].as_str().or_else(|| v["checksum"].as_str()).map(str::to_ascii_lowercase),
        oam_id,
    })
}

fn parse_footprint(g: &Value) -> std::result::Result<Option<Vec<Point<f64>>>, String> {
    if g.is_null() {
        return Ok(None);
    }
    let ring = match g["type"].as_str() {
        Some("Polygon") => &g["coordinates"][0],
        Some("MultiPolygon") => &g["coordinates"][0][0],
        other => return Err(format!("unsupported geometry {other:?}")),
    };
    let pts = ring
        .as_array()
        .ok_or("missing ring")?
        .iter()
        .map(|c| match (c[0].as_f64(), c[1].as_f64()) {
            (Some(x), Some(y)) => Ok(Point::new(x, y)),
            _ => Err("bad coordinate".to_string()),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Some(pts))
}

/// HTTP client for the catalog with bounded retries on transient failures.
pub struct CatalogClient {
    endpoint: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
}

enum Fetched<T> {
    Ok(T),
    NotFound,
}

impl CatalogClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_connect(Some(Duration::from_secs(30)))
            .timeout_recv_response(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        CatalogClient {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            retries: 3,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    /// Runs `f` on a successful response. Transport errors, 429 and 5xx are
    /// retried; 404 maps to `NotFound`; other statuses fail immediately.
    fn get<T>(
        &self,
        url: &str,
        query: &[(&str, String)],
        mut f: impl FnMut(ureq::http::Response<ureq::Body>) -> Result<T>,
    ) -> Result<Fetched<T>> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            let mut req = self.agent.get(url);
            for (k, v) in query {
                req = req.query(*k, v);
            }
            match req.call() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        200..=299 => return f(resp).map(Fetched::Ok),
                        404 => return Ok(Fetched::NotFound),
                        429 | 500..=599 => last = format!("{url}: HTTP {status}"),
                        _ => return Err(Error::Validation(format!("{url}: HTTP {status}"))),
                    }
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            tracing::warn!(attempt, "{last}");
        }
        Err(Error::Retriable(format!("{last} (after {} attempts)", self.retries + 1)))
    }

    fn get_json(&self, url: &str, query: &[(&str, String)]) -> Result<Fetched<Value>> {
        self.get(url, query, |mut resp| {
            let text = resp
                .body_mut()
                .with_config()
                .limit(64 << 20)
                .read_to_string()
                .map_err(|e| Error::Retriable(format!("{url}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(url, "body", e))
        })
    }

    /// Lists catalog entries intersecting `bbox` that pass `policy`, newest
    /// first. Entries with the same date keep id order.
    pub fn search(&self, bbox: &Rect<f64>, policy: &AdmissionPolicy) -> Result<Vec<CatalogEntry>> {
        policy.validate()?;
        let url = format!("{}/meta", self.endpoint);
        let bbox_s = format!("{},{},{},{}", bbox.min_x, bbox.min_y, bbox.max_x, bbox.max_y);
        let mut out = Vec::new();
        for page in 1..=MAX_PAGES {
            let q = [("bbox", bbox_s.clone()), ("page", page.to_string()), ("limit", PAGE_LIMIT.to_string())];
            let Fetched::Ok(doc) = self.get_json(&url, &q)? else {
                return Err(Error::NotFound(format!("catalog endpoint {url}")));
            };
            let results = doc["results"]
                .as_array()
                .ok_or_else(|| Error::parse(&url, "results", "missing or not an array"))?;
            for (i, r) in results.iter().enumerate() {
                let e = parse_entry(r, &format!("{url} page {page} results[{i}]"))?;
                let (ok, reasons) = admit_entry(&e, policy);
                if ok {
                    out.push(e);
                } else {
                    let why: Vec<String> = reasons.iter().map(ToString::to_string).collect();
                    tracing::debug!(oam_id = %e.oam_id, "rejected: {}", why.join("; "));
                }
            }
            let found = doc["meta"]["found"].as_u64().map(|n| n as usize);
            let done = results.len() < PAGE_LIMIT || found.is_some_and(|n| page * PAGE_LIMIT >= n);
            if done {
                break;
            }
        }
        sort_entries(&mut out);
        Ok(out)
    }

    pub fn lookup(&self, oam_id: &str) -> Result<CatalogEntry> {
        let url = format!("{}/meta/{}", self.endpoint, oam_id);
        let doc = match self.get_json(&url, &[])? {
            Fetched::Ok(d) => d,
            Fetched::NotFound => return Err(Error::NotFound(format!("catalog id `{oam_id}`"))),
        };
        let rec = match &doc["results"] {
            Value::Array(a) => a.first().cloned(),
            Value::Object(_) => Some(doc["results"].clone()),
            _ => None,
        }
        .ok_or_else(|| Error::NotFound(format!("catalog id `{oam_id}`")))?;
        parse_entry(&rec, &url)
    }

    /// Downloads an asset into `dest` as `<id>.tif` with a `<id>.json`
    /// sidecar. A cached file whose checksum matches its sidecar is reused
    /// without contacting the catalog.
    pub fn fetch(&self, oam_id: &str, dest: impl AsRef<Path>) -> Result<FetchOutcome> {
        let dest = dest.as_ref();
        if oam_id.is_empty() || oam_id.contains(['/', '\\']) || oam_id.starts_with('.') {
            return Err(Error::Config(format!("invalid catalog id `{oam_id}`")));
        }
        let (path, sidecar) = asset_paths(dest, oam_id);
        if let Some(s) = verify_cached(&path, &sidecar)? {
            tracing::info!(oam_id, "cached asset verified; skipping download");
            return Ok(FetchOutcome {
                path,
                entry: s.entry,
                sha256: s.sha256,
                cached: true,
            });
        }
        let entry = self.lookup(oam_id)?;
        std::fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
        let tmp = tempfile::NamedTempFile::new_in(dest).map_err(|e| Error::io(dest, e))?;
        let (bytes, digest) = match self.get(&entry.download_url, &[], |resp| {
            let mut reader = resp.into_body().into_reader();
            let mut out = BufWriter::new(tmp.as_file());
            copy_hashing(&mut reader, &mut out).map_err(|e| Error::Retriable(format!("{}: {e}", entry.download_url)))
        })? {
            Fetched::Ok(r) => r,
            Fetched::NotFound => return Err(Error::NotFound(format!("asset {}", entry.download_url))),
        };
        if let Some(size) = entry.file_size {
            if size != bytes {
                return Err(Error::Integrity(format!("{oam_id}: downloaded {bytes} bytes, catalog lists {size}")));
            }
        }
        if let Some(want) = &entry.sha256 {
            if *want != digest {
                return Err(Error::Integrity(format!("{oam_id}: sha256 {digest} does not match catalog {want}")));
            }
        }
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        let side = Sidecar {
            entry: entry.clone(),
            sha256: digest.clone(),
            bytes,
        };
        write_atomic(&sidecar, serde_json::to_string_pretty(&side).expect("sidecar serializes").as_bytes())?;
        Ok(FetchOutcome {
            path,
            entry,
            sha256: digest,
            cached: false,
        })
    }
}

/// Newest first; undated entries last; ties by id.
pub fn sort_entries(entries: &mut [CatalogEntry]) {
    entries.sort_by(|a, b| {
        b.acquisition_date
            .cmp(&a.acquisition_date)
            .then_with(|| a.oam_id.cmp(&b.oam_id))
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome {
    pub path: PathBuf,
    pub entry: CatalogEntry,
    pub sha256: String,
    /// True when the cached copy was reused.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Checksum of the bytes on disk.
    pub sha256: String,
    pub bytes: u64,
    /// Catalog record as listed at download time.
    pub entry: CatalogEntry,
}

pub fn asset_paths(dest: &Path, oam_id: &str) -> (PathBuf, PathBuf) {
    (dest.join(format!("{oam_id}.tif")), dest.join(format!("{oam_id}.json")))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), "sidecar", e))
}

fn verify_cached(path: &Path, sidecar: &Path) -> Result<Option<Sidecar>> {
    if !path.exists() || !sidecar.exists() {
        return Ok(None);
    }
    let side = match read_sidecar(sidecar) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!("{e}; re-downloading");
            return Ok(None);
        }
    };
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let (_, digest) = copy_hashing(&mut f, &mut io::sink()).map_err(|e| Error::io(path, e))?;
    if digest == side.sha256 {
        Ok(Some(side))
    } else {
        tracing::warn!(path = %path.display(), "cached asset checksum mismatch; re-downloading");
        Ok(None)
    }
}

fn copy_hashing(r: &mut impl Read, w: &mut impl Write) -> io::Result<(u64, String)> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        w.write_all(&buf[..n])?;
        total += n as u64;
    }
    w.flush()?;
    Ok((total, hex::encode(hasher.finalize())))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
