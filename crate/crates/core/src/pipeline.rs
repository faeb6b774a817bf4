//! End-to-end run: configuration, stage ordering and the run directory.
//!
//! A run directory holds `config.resolved.toml`, one sub-directory per stage,
//! `log.jsonl` with per-stage timings, `manifest.json` with a sha256 of every
//! artifact, and `failure.json` when a stage fails.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::evalsuite;
use crate::geogrid::{self, Grid, GridSpec, TileId};
use crate::infer::reference::{ReferenceClassifier, ReferenceParams};
use crate::infer::{self, ClassifierBackend, InferOptions};
use crate::ingest::{self, AdmissionPolicy, CatalogClient};
use crate::raster::RasterDataset;
use crate::records::{self, PredictionRow};
use crate::sociocorr::{self, IndicatorLayer};
use crate::tiles::{self, ExtractOptions};
use crate::wastemap::{self, MapFormat, RegionSummary, TileOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Grid,
    Tiles,
    Dataset,
    Infer,
    Eval,
    Map,
    Corr,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Grid,
        Stage::Tiles,
        Stage::Dataset,
        Stage::Infer,
        Stage::Eval,
        Stage::Map,
        Stage::Corr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Grid => "grid",
            Stage::Tiles => "tiles",
            Stage::Dataset => "dataset",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::Map => "map",
            Stage::Corr => "corr",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Reference,
    Onnx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub stages: Vec<Stage>,
    pub out_dir: PathBuf,
    /// Fixed run directory name; a UTC timestamp when absent.
    pub name: Option<String>,
    /// Thread count for every parallel stage; all cores when absent.
    pub workers: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            stages: vec![Stage::Grid, Stage::Infer, Stage::Map],
            out_dir: PathBuf::from("runs"),
            name: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub region_id: String,
    pub raster: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub endpoint: String,
    /// `w,s,e,n`; when set the stage writes the admitted catalog entries.
    pub bbox: Option<String>,
    pub oam_ids: Vec<String>,
    pub max_gsd_m: f64,
    pub min_area_km2: f64,
    /// Download cache shared between runs.
    pub cache_dir: PathBuf,
    pub retries: u32,
}

impl Default for IngestSection {
    fn default() -> Self {
        let p = AdmissionPolicy::default();
        IngestSection {
            endpoint: ingest::DEFAULT_ENDPOINT.to_string(),
            bbox: None,
            oam_ids: Vec::new(),
            max_gsd_m: p.max_gsd_m,
            min_area_km2: p.min_area_km2,
            cache_dir: PathBuf::from("cache"),
            retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub tile_size_m: f64,
    pub include_partials: bool,
    pub geojson: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            tile_size_m: geogrid::DEFAULT_TILE_SIZE_M,
            include_partials: false,
            geojson: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilesSection {
    pub batch_size: usize,
    /// Write every tensor as a PNG (large).
    pub png: bool,
}

impl Default for TilesSection {
    fn default() -> Self {
        TilesSection {
            batch_size: 64,
            png: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// CSV or GeoJSON (`.geojson`/`.json`, lon/lat) annotations.
    pub annotations: Option<PathBuf>,
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Write one PNG per manifest tile for the trainer.
    pub images: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            annotations: None,
            ratios: DEFAULT_RATIOS,
            seed: 42,
            images: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub backend: BackendKind,
    pub model: Option<PathBuf>,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub marker_fraction: f64,
    pub red_min: u8,
    pub green_max: u8,
    pub steepness: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        let r = ReferenceParams::default();
        InferSection {
            backend: BackendKind::Reference,
            model: None,
            batch_size: 64,
            checkpoint_every: 100,
            marker_fraction: r.fraction,
            red_min: r.red_min,
            green_max: r.green_max,
            steepness: r.steepness,
        }
    }
}

impl InferSection {
    pub fn reference_params(&self) -> ReferenceParams {
        ReferenceParams {
            fraction: self.marker_fraction,
            red_min: self.red_min,
            green_max: self.green_max,
            steepness: self.steepness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub truth: Option<PathBuf>,
    /// Used when the infer stage does not run.
    pub predictions: Option<PathBuf>,
    /// e.g. `50,100,200,full`; no curves when absent.
    pub bootstrap_sizes: Option<String>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            truth: None,
            predictions: None,
            bootstrap_sizes: None,
            replicates: 1000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// Used when the infer stage does not run; every row counts as analyzed.
    pub predictions: Option<PathBuf>,
    pub min_valid_fraction: f64,
    pub waste_only: bool,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            predictions: None,
            min_valid_fraction: wastemap::DEFAULT_MIN_VALID_FRACTION,
            waste_only: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrSection {
    /// Used when the map stage does not run.
    pub summary: Option<PathBuf>,
    /// Region outlines (GeoJSON); required for raster layers.
    pub regions: Option<PathBuf>,
    /// `name=path[:mean|sum|density]`.
    pub layers: Vec<String>,
    pub exclude: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub ingest: IngestSection,
    pub grid: GridSection,
    pub tiles: TilesSection,
    pub dataset: DatasetSection,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub map: MapSection,
    pub corr: CorrSection,
    pub inputs: Vec<InputSpec>,
}

/// Parses a `value` given on the command line: TOML syntax when it parses,
/// otherwise a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses a TOML document and applies `section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}`: expected section.key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override `{o}`: expected section.key=value")))?;
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("override `{o}`: `{section}` is not a section")));
            };
            t.insert(field.to_string(), override_value(raw.trim()));
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.run.out_dir);
        fix(&mut self.ingest.cache_dir);
        for i in &mut self.inputs {
            fix(&mut i.raster);
        }
        fix_opt(&mut self.dataset.annotations);
        fix_opt(&mut self.infer.model);
        fix_opt(&mut self.eval.truth);
        fix_opt(&mut self.eval.predictions);
        fix_opt(&mut self.map.predictions);
        fix_opt(&mut self.corr.summary);
        fix_opt(&mut self.corr.regions);
        self.corr.layers = self
            .corr
            .layers
            .iter()
            .map(|l| match l.split_once('=') {
                Some((name, p)) if Path::new(p).is_relative() => format!("{name}={}", base.join(p).display()),
                _ => l.clone(),
            })
            .collect();
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn has(&self, s: Stage) -> bool {
        self.run.stages.contains(&s)
    }

    /// Checks everything that can be checked without doing work.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.run.stages.is_empty() {
            return err("no stages selected".into());
        }
        if self.run.workers == Some(0) {
            return err("workers must be at least 1".into());
        }
        if let Some(n) = &self.run.name {
            if n.is_empty() || n.contains(['/', '\\']) || n.starts_with('.') {
                return err(format!("invalid run name `{n}`"));
            }
        }
        let mut ids = std::collections::BTreeSet::new();
        for i in &self.inputs {
            if i.region_id.is_empty() || i.region_id.contains([',', '/', '\\']) {
                return err(format!("invalid region id `{}`", i.region_id));
            }
            if !ids.insert(&i.region_id) {
                return err(format!("duplicate region id `{}`", i.region_id));
            }
            if !i.raster.is_file() {
                return err(format!("input raster {} does not exist", i.raster.display()));
            }
        }
        let needs_inputs = [Stage::Grid, Stage::Tiles, Stage::Infer].iter().any(|s| self.has(*s));
        if needs_inputs && self.inputs.is_empty() && !(self.has(Stage::Ingest) && !self.ingest.oam_ids.is_empty()) {
            return err("grid/tiles/infer need at least one [[inputs]] entry or ingest.oam_ids".into());
        }
        if self.has(Stage::Ingest) {
            AdmissionPolicy {
                max_gsd_m: self.ingest.max_gsd_m,
                min_area_km2: self.ingest.min_area_km2,
            }
            .validate()?;
            if let Some(b) = &self.ingest.bbox {
                ingest::parse_bbox(b)?;
            }
            if self.ingest.bbox.is_none() && self.ingest.oam_ids.is_empty() {
                return err("ingest needs ingest.bbox or ingest.oam_ids".into());
            }
        }
        if !(self.grid.tile_size_m > 0.0 && self.grid.tile_size_m.is_finite()) {
            return err(format!("tile size {} must be positive", self.grid.tile_size_m));
        }
        for (s, why) in [(Stage::Tiles, "tiles"), (Stage::Infer, "infer"), (Stage::Dataset, "dataset")] {
            if self.has(s) && !self.has(Stage::Grid) {
                return err(format!("stage `{why}` needs stage `grid`"));
            }
        }
        if self.tiles.batch_size == 0 || self.infer.batch_size == 0 {
            return err("batch sizes must be at least 1".into());
        }
        if self.has(Stage::Dataset) {
            dataset::validate_ratios(self.dataset.ratios)?;
            match &self.dataset.annotations {
                Some(p) if p.is_file() => {}
                Some(p) => return err(format!("annotations {} do not exist", p.display())),
                None => return err("stage `dataset` needs dataset.annotations".into()),
            }
        }
        if self.has(Stage::Infer) {
            match self.infer.backend {
                BackendKind::Reference => {
                    let f = self.infer.marker_fraction;
                    if !(0.0..1.0).contains(&f) || !(self.infer.steepness > 0.0) {
                        return err("reference backend needs 0 <= marker_fraction < 1 and steepness > 0".into());
                    }
                }
                BackendKind::Onnx => {
                    if !cfg!(feature = "onnx") {
                        return err("this build has no ONNX support".into());
                    }
                    match &self.infer.model {
                        Some(p) if p.is_file() => {}
                        Some(p) => return err(format!("model {} does not exist", p.display())),
                        None => return err("onnx backend needs infer.model".into()),
                    }
                }
            }
        }
        let file_or = |stage: Stage, upstream: Stage, p: &Option<PathBuf>, key: &str| -> Result<()> {
            if !self.has(stage) || self.has(upstream) {
                return Ok(());
            }
            match p {
                Some(p) if p.is_file() => Ok(()),
                Some(p) => Err(Error::Config(format!("{key} {} does not exist", p.display()))),
                None => Err(Error::Config(format!("stage `{stage}` needs stage `{upstream}` or {key}"))),
            }
        };
        file_or(Stage::Eval, Stage::Infer, &self.eval.predictions, "eval.predictions")?;
        file_or(Stage::Map, Stage::Infer, &self.map.predictions, "map.predictions")?;
        file_or(Stage::Corr, Stage::Map, &self.corr.summary, "corr.summary")?;
        if self.has(Stage::Eval) {
            match &self.eval.truth {
                Some(p) if p.is_file() => {}
                Some(p) => return err(format!("eval.truth {} does not exist", p.display())),
                None => return err("stage `eval` needs eval.truth".into()),
            }
            if self.eval.replicates == 0 {
                return err("eval.replicates must be at least 1".into());
            }
        }
        if !(0.0..=1.0).contains(&self.map.min_valid_fraction) {
            return err("map.min_valid_fraction must lie in [0, 1]".into());
        }
        if self.has(Stage::Corr) {
            if self.corr.layers.is_empty() {
                return err("stage `corr` needs at least one layer".into());
            }
            let layers = self
                .corr
                .layers
                .iter()
                .map(|l| IndicatorLayer::parse(l))
                .collect::<Result<Vec<_>>>()?;
            let rasters = layers.iter().any(|l| matches!(l.source, sociocorr::LayerSource::Raster { .. }));
            if rasters && self.corr.regions.is_none() {
                return err("raster layers need corr.regions".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
    /// Stage-specific counters (tiles processed and so on).
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub stages: Vec<StageTiming>,
    /// Relative artifact path to sha256.
    pub artifacts: BTreeMap<String, String>,
    pub summaries: Vec<RegionSummary<f64>>,
}

/// Files excluded from the checksum manifest because they hold timings.
const UNHASHED: [&str; 3] = ["log.jsonl", "manifest.json", "failure.json"];

struct Region {
    id: String,
    raster: RasterDataset,
    grid: Option<Grid<f64>>,
}

#[derive(Default)]
struct State {
    regions: Vec<Region>,
    predictions: Option<Vec<PredictionRow>>,
    skipped: BTreeMap<String, Vec<TileId>>,
    summaries: Option<Vec<RegionSummary<f64>>>,
}

struct Logger {
    out: BufWriter<File>,
}

impl Logger {
    fn event(&mut self, stage: Option<Stage>, event: &str, extra: serde_json::Value) {
        let mut v = serde_json::json!({
            "ts": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            "event": event,
        });
        if let Some(s) = stage {
            v["stage"] = serde_json::Value::String(s.to_string());
        }
        if let serde_json::Value::Object(m) = extra {
            v.as_object_mut().expect("object").extend(m);
        }
        let _ = writeln!(self.out, "{v}");
        let _ = self.out.flush();
    }
}

fn create_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let base = &cfg.run.out_dir;
    std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let name = match &cfg.run.name {
        Some(n) => n.clone(),
        None => chrono::Utc::now().format("run-%Y%m%dT%H%M%S%.3fZ").to_string(),
    };
    let dir = base.join(&name);
    if dir.exists() && cfg.run.name.is_none() {
        return Err(Error::Config(format!("run directory {} already exists", dir.display())));
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// sha256 of every file under `dir` except logs, keyed by relative path.
pub fn checksum_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(dir).expect("under run dir").to_string_lossy().replace('\\', "/");
            if UNHASHED.contains(&rel.as_str()) || rel.ends_with(".tmp") {
                continue;
            }
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(out)
}

fn write_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let sums = checksum_tree(dir)?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "sha256": sums })).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(sums)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Executes the selected stages in order. On failure the partial artifacts
/// stay in place, `failure.json` names the stage and the error, and the
/// error is returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let run_dir = create_run_dir(cfg)?;
    std::fs::write(run_dir.join("config.resolved.toml"), cfg.to_toml())
        .map_err(|e| Error::io(run_dir.join("config.resolved.toml"), e))?;
    let log_path = run_dir.join("log.jsonl");
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Logger {
        out: BufWriter::new(log_file),
    };
    tracing::info!(run_dir = %run_dir.display(), "run started");
    log.event(None, "run_start", serde_json::json!({ "stages": cfg.run.stages }));

    let pool = match cfg.run.workers {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        ),
        None => None,
    };
    let mut state = State::default();
    let mut timings = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| cfg.has(*s)) {
        log.event(Some(stage), "stage_start", serde_json::json!({}));
        let t0 = Instant::now();
        let res = match &pool {
            Some(p) => p.install(|| run_stage(stage, cfg, &run_dir, &mut state)),
            None => run_stage(stage, cfg, &run_dir, &mut state),
        };
        let seconds = t0.elapsed().as_secs_f64();
        match res {
            Ok(counters) => {
                log.event(
                    Some(stage),
                    "stage_finish",
                    serde_json::json!({ "elapsed_ms": seconds * 1e3, "counters": counters }),
                );
                tracing::info!(%stage, seconds, "stage finished");
                timings.push(StageTiming { stage, seconds, counters });
            }
            Err(e) => {
                let record = serde_json::json!({
                    "stage": stage,
                    "error": e.to_string(),
                    "exit_code": e.exit_code(),
                    "completed_stages": timings.iter().map(|t: &StageTiming| t.stage).collect::<Vec<_>>(),
                });
                write_json(&run_dir.join("failure.json"), &record)?;
                log.event(Some(stage), "stage_failed", serde_json::json!({ "elapsed_ms": seconds * 1e3, "error": e.to_string() }));
                write_manifest(&run_dir)?;
                return Err(e);
            }
        }
    }
    let artifacts = write_manifest(&run_dir)?;
    log.event(None, "run_finish", serde_json::json!({ "artifacts": artifacts.len() }));
    Ok(RunReport {
        run_dir,
        stages: timings,
        artifacts,
        summaries: state.summaries.unwrap_or_default(),
    })
}

fn open_regions(cfg: &RunConfig, state: &mut State) -> Result<()> {
    if !state.regions.is_empty() {
        return Ok(());
    }
    for i in &cfg.inputs {
        state.regions.push(Region {
            id: i.region_id.clone(),
            raster: RasterDataset::open(&i.raster)?,
            grid: None,
        });
    }
    Ok(())
}

fn region_grid(r: &Region) -> &Grid<f64> {
    r.grid.as_ref().expect("grid stage runs before its consumers")
}

fn make_backend(cfg: &InferSection) -> Result<Box<dyn ClassifierBackend>> {
    match cfg.backend {
        BackendKind::Reference => Ok(Box::new(ReferenceClassifier::new(cfg.reference_params()))),
        #[cfg(feature = "onnx")]
        BackendKind::Onnx => {
            let path = cfg.model.as_ref().ok_or_else(|| Error::Config("onnx backend needs a model".into()))?;
            Ok(Box::new(infer::onnx::OnnxClassifier::load(path)?))
        }
        #[cfg(not(feature = "onnx"))]
        BackendKind::Onnx => Err(Error::Config("this build has no ONNX support".into())),
    }
}

fn run_stage(stage: Stage, cfg: &RunConfig, dir: &Path, state: &mut State) -> Result<BTreeMap<String, u64>> {
    let mut counters = BTreeMap::new();
    match stage {
        Stage::Ingest => {
            let out = dir.join("ingest");
            mkdir(&out)?;
            let client = CatalogClient::new(&cfg.ingest.endpoint)
                .with_retries(cfg.ingest.retries, std::time::Duration::from_millis(500));
            let policy = AdmissionPolicy {
                max_gsd_m: cfg.ingest.max_gsd_m,
                min_area_km2: cfg.ingest.min_area_km2,
            };
            if let Some(b) = &cfg.ingest.bbox {
                let entries = client.search(&ingest::parse_bbox(b)?, &policy)?;
                counters.insert("admitted".into(), entries.len() as u64);
                write_json(&out.join("catalog.json"), &entries)?;
            }
            let mut fetched = Vec::new();
            for id in &cfg.ingest.oam_ids {
                let f = client.fetch(id, &cfg.ingest.cache_dir)?;
                let (ok, why) = ingest::admit_entry(&f.entry, &policy);
                if !ok {
                    let why: Vec<String> = why.iter().map(ToString::to_string).collect();
                    tracing::warn!(oam_id = %id, "fetched entry fails admission: {}", why.join("; "));
                }
                state.regions.retain(|r| r.id != *id);
                state.regions.push(Region {
                    id: id.clone(),
                    raster: RasterDataset::open(&f.path)?,
                    grid: None,
                });
                fetched.push(serde_json::json!({ "oam_id": id, "sha256": f.sha256, "admitted": ok }));
            }
            counters.insert("fetched".into(), fetched.len() as u64);
            write_json(&out.join("fetched.json"), &fetched)?;
        }
        Stage::Grid => {
            let ingested: Vec<Region> = std::mem::take(&mut state.regions);
            open_regions(cfg, state)?;
            for r in ingested {
                if !state.regions.iter().any(|x| x.id == r.id) {
                    state.regions.push(r);
                }
            }
            let out = dir.join("grid");
            mkdir(&out)?;
            let spec = GridSpec {
                tile_size_m: cfg.grid.tile_size_m,
                working_crs: None,
                origin: None,
                include_partials: cfg.grid.include_partials,
            };
            let mut total = 0;
            for r in &mut state.regions {
                let g = geogrid::make_grid(r.raster.meta(), &spec)?;
                geogrid::write_grid_csv(&g, out.join(format!("{}.csv", r.id)))?;
                if cfg.grid.geojson {
                    geogrid::write_grid_geojson(&g, out.join(format!("{}.geojson", r.id)))?;
                }
                total += g.len();
                r.grid = Some(g);
            }
            counters.insert("tiles".into(), total as u64);
        }
        Stage::Tiles => {
            let out = dir.join("tiles");
            mkdir(&out)?;
            let (mut n, mut skipped) = (0u64, 0u64);
            for r in &state.regions {
                let g = region_grid(r);
                let opts = ExtractOptions {
                    batch_size: cfg.tiles.batch_size,
                    ..Default::default()
                };
                let png_dir = out.join(&r.id);
                if cfg.tiles.png {
                    mkdir(&png_dir)?;
                }
                let mut index = String::from("row,col,valid_fraction\n");
                let mut stream = tiles::extract_batch(&r.raster, &g.tiles, opts)?;
                for batch in stream.by_ref() {
                    for t in batch? {
                        index.push_str(&format!("{},{},{:.6}\n", t.tile_id.row, t.tile_id.col, t.valid_fraction));
                        if cfg.tiles.png {
                            t.write_png(png_dir.join(format!("{}_{}.png", t.tile_id.row, t.tile_id.col)))?;
                        }
                        n += 1;
                    }
                }
                skipped += stream.skipped().len() as u64;
                let path = out.join(format!("{}.csv", r.id));
                std::fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
            }
            counters.insert("tiles".into(), n);
            counters.insert("skipped".into(), skipped);
        }
        Stage::Dataset => {
            let out = dir.join("dataset");
            mkdir(&out)?;
            let path = cfg.dataset.annotations.as_ref().expect("validated");
            let is_geojson = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("geojson") || e.eq_ignore_ascii_case("json"));
            let imported = if is_geojson {
                let r = state
                    .regions
                    .first()
                    .ok_or_else(|| Error::Config("GeoJSON annotations need an input region".into()))?;
                if state.regions.len() > 1 {
                    return Err(Error::Config("GeoJSON annotations are supported for single-region runs".into()));
                }
                dataset::import_annotations_geojson(path, region_grid(r), Some(&r.id), true)?
            } else {
                dataset::import_annotations(path)?
            };
            write_json(&out.join("balance.json"), &imported.balance)?;
            let (manifest, warnings) = dataset::make_splits(&imported.records, cfg.dataset.ratios, cfg.dataset.seed)?;
            dataset::export_manifest(&manifest, out.join("manifest.csv"))?;
            if !warnings.is_empty() {
                write_json(&out.join("warnings.json"), &warnings)?;
            }
            counters.insert("records".into(), manifest.records.len() as u64);
            if cfg.dataset.images {
                let mut written = 0u64;
                for r in &state.regions {
                    let g = region_grid(r);
                    let wanted: Vec<_> = manifest
                        .records
                        .iter()
                        .filter(|m| m.region_id == r.id)
                        .filter_map(|m| g.get(m.tile_id).cloned())
                        .collect();
                    if wanted.is_empty() {
                        continue;
                    }
                    let img_dir = out.join("images").join(&r.id);
                    mkdir(&img_dir)?;
                    for batch in tiles::extract_batch(&r.raster, &wanted, ExtractOptions::default())? {
                        for t in batch? {
                            t.write_png(img_dir.join(format!("{}_{}.png", t.tile_id.row, t.tile_id.col)))?;
                            written += 1;
                        }
                    }
                }
                counters.insert("images".into(), written);
            }
        }
        Stage::Infer => {
            let out = dir.join("infer");
            mkdir(&out)?;
            let backend = make_backend(&cfg.infer)?;
            let opts = InferOptions {
                batch_size: cfg.infer.batch_size,
                workers: None,
                checkpoint: Some(out.join("checkpoint.json")),
                checkpoint_every: cfg.infer.checkpoint_every,
            };
            let mut rows = Vec::new();
            let mut skipped_csv = String::from("region_id,row,col\n");
            let t0 = Instant::now();
            for r in &state.regions {
                let g = region_grid(r);
                let res = infer::run_inference(&r.raster, &g.tiles, backend.as_ref(), &opts)?;
                rows.extend(res.predictions.iter().map(|p| p.to_row(&r.id)));
                for s in &res.skipped {
                    skipped_csv.push_str(&format!("{},{},{}\n", r.id, s.row, s.col));
                }
                state.skipped.insert(r.id.clone(), res.skipped);
            }
            let secs = t0.elapsed().as_secs_f64();
            records::write_predictions_csv(out.join("predictions.csv"), &rows)?;
            let p = out.join("skipped.csv");
            std::fs::write(&p, skipped_csv).map_err(|e| Error::io(&p, e))?;
            counters.insert("predictions".into(), rows.len() as u64);
            counters.insert("tiles_per_second".into(), (rows.len() as f64 / secs.max(1e-9)) as u64);
            state.predictions = Some(rows);
        }
        Stage::Eval => {
            let out = dir.join("eval");
            mkdir(&out)?;
            let preds = match &state.predictions {
                Some(p) => p.clone(),
                None => records::read_predictions_csv(cfg.eval.predictions.as_ref().expect("validated"))?,
            };
            let truth = records::read_predictions_csv(cfg.eval.truth.as_ref().expect("validated"))?;
            let mut report = evalsuite::evaluate(&preds, &truth)?;
            if let Some(sizes) = &cfg.eval.bootstrap_sizes {
                let (scores, positive) = evalsuite::joined_scores(&preds, &truth)?;
                let sizes = evalsuite::parse_sizes(sizes, scores.len())?;
                let curve = evalsuite::bootstrap_curves(&scores, &positive, &sizes, cfg.eval.replicates, cfg.eval.seed)?;
                curve.write_csv(out.join("bootstrap.csv"))?;
                report.bootstrap = Some(curve);
            }
            write_json(&out.join("report.json"), &report)?;
            let md = out.join("report.md");
            std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
            counters.insert("n".into(), report.n as u64);
        }
        Stage::Map => {
            let out = dir.join("map");
            mkdir(&out)?;
            let summaries = match &state.predictions {
                Some(rows) => {
                    let mut s = Vec::new();
                    for r in &state.regions {
                        let g = region_grid(r);
                        let region_rows: Vec<PredictionRow> =
                            rows.iter().filter(|p| p.key.region_id == r.id).cloned().collect();
                        let by_tile: BTreeMap<TileId, &PredictionRow> =
                            region_rows.iter().map(|p| (p.key.tile, p)).collect();
                        let outcomes = g.tiles.iter().map(|t| TileOutcome {
                            prediction: by_tile.get(&t.tile_id).map(|p| p.class),
                            valid_fraction: t.valid_fraction,
                        });
                        s.push(wastemap::oddmswc::<f64>(&r.id, outcomes, cfg.map.min_valid_fraction)?);
                        wastemap::export_map(
                            g,
                            &region_rows,
                            out.join(format!("{}.geojson", r.id)),
                            MapFormat::GeoJson,
                            cfg.map.waste_only,
                        )?;
                    }
                    s
                }
                None => {
                    let rows = records::read_predictions_csv(cfg.map.predictions.as_ref().expect("validated"))?;
                    wastemap::summarize_predictions(&rows)?
                }
            };
            let ranked = wastemap::rank_regions(summaries);
            wastemap::write_summary_csv(&ranked, out.join("summary.csv"))?;
            counters.insert("regions".into(), ranked.len() as u64);
            state.summaries = Some(ranked);
        }
        Stage::Corr => {
            let out = dir.join("corr");
            let summaries = match &state.summaries {
                Some(s) => s.clone(),
                None => wastemap::read_summary_csv(cfg.corr.summary.as_ref().expect("validated"))?,
            };
            let extents = match &cfg.corr.regions {
                Some(p) => sociocorr::read_regions_geojson(p)?,
                None => Vec::new(),
            };
            let mut layers = Vec::new();
            for spec in &cfg.corr.layers {
                let layer = IndicatorLayer::parse(spec)?;
                let values = sociocorr::layer_values::<f64>(&layer, &extents)?;
                layers.push((layer.name, values));
            }
            let report = sociocorr::sensitivity_exclude(&summaries, &layers, &cfg.corr.exclude)?;
            report.write(&out)?;
            counters.insert("regions".into(), report.regions as u64);
        }
    }
    Ok(counters)
}
