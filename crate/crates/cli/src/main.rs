use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dumpscan_core::dataset;
use dumpscan_core::evalsuite;
use dumpscan_core::geogrid::{self, GridSpec};
use dumpscan_core::infer::reference::{ReferenceClassifier, ReferenceParams};
use dumpscan_core::infer::{self, ClassifierBackend, InferOptions};
use dumpscan_core::ingest::{self, AdmissionPolicy, CatalogClient};
use dumpscan_core::pipeline::{self, RunConfig, Stage};
use dumpscan_core::raster::RasterDataset;
use dumpscan_core::records;
use dumpscan_core::sociocorr::{self, IndicatorLayer};
use dumpscan_core::synthbench::{self, PlantingPlan};
use dumpscan_core::tiles::{self, ExtractOptions};
use dumpscan_core::wastemap::{self, MapFormat, TileOutcome};
use dumpscan_core::{Error, Grid};

#[derive(Parser)]
#[command(name = "dumpscan", version, about = "Tile-level open-dump waste mapping from UAV orthomosaics")]
struct Cli {
    /// Log format on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Json)]
    log_format: LogFormat,
    /// Log filter (tracing env-filter syntax).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Catalog search and asset download.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Analysis grid generation.
    #[command(subcommand)]
    Grid(GridCmd),
    /// Tile tensor extraction.
    #[command(subcommand)]
    Tiles(TilesCmd),
    /// Annotation import and train/val/test splits.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Tile classification.
    #[command(subcommand)]
    Infer(InferCmd),
    /// Metrics and bootstrap curves.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Region scores and contamination maps.
    #[command(subcommand)]
    Map(MapCmd),
    /// Rank correlation against indicator layers.
    #[command(subcommand)]
    Corr(CorrCmd),
    /// Synthetic fixtures.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Run the configured pipeline stages into a new run directory.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum IngestCmd {
    Search {
        /// w,s,e,n in degrees.
        #[arg(long)]
        bbox: String,
        #[arg(long, default_value_t = 0.06)]
        max_gsd: f64,
        #[arg(long, default_value_t = 1.0)]
        min_area: f64,
        #[arg(long, default_value = ingest::DEFAULT_ENDPOINT)]
        endpoint: String,
        /// Write the admitted entries as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Fetch {
        #[arg(long)]
        oam_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = ingest::DEFAULT_ENDPOINT)]
        endpoint: String,
    },
}

#[derive(Subcommand)]
enum GridCmd {
    Make {
        #[arg(long)]
        raster: PathBuf,
        /// Grid CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = geogrid::DEFAULT_TILE_SIZE_M)]
        tile_size: f64,
        /// Keep tiles only partly covered by the footprint.
        #[arg(long)]
        include_partials: bool,
        #[arg(long)]
        geojson: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TilesCmd {
    /// Writes one PNG per tile as `<out>/<row>_<col>.png`.
    Extract {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to the tiles of this region in a manifest or label CSV.
        #[arg(long)]
        only: Option<PathBuf>,
        #[arg(long)]
        region: Option<String>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Args)]
struct LabelSource {
    /// Annotation CSV or GeoJSON.
    #[arg(long)]
    labels: PathBuf,
    /// Grid CSV, needed to snap GeoJSON annotations.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Region for GeoJSON features without `region_id`.
    #[arg(long)]
    region: Option<String>,
    /// GeoJSON coordinates are in the grid CRS rather than lon/lat.
    #[arg(long)]
    grid_crs: bool,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Normalizes and deduplicates annotations; prints the balance report.
    Import {
        #[command(flatten)]
        src: LabelSource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Split {
        #[command(flatten)]
        src: LabelSource,
        #[arg(long, default_value = "0.7,0.15,0.15")]
        ratios: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Reference,
    Onnx,
}

#[derive(Subcommand)]
enum InferCmd {
    Run {
        #[arg(long)]
        raster: PathBuf,
        /// Grid CSV; built from the raster with default settings when absent.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Backend::Reference)]
        backend: Backend,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "region")]
        region: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
        /// Reference backend: marker fraction threshold.
        #[arg(long, default_value_t = ReferenceParams::default().fraction)]
        marker_fraction: f64,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    Metrics {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    Bootstrap {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "50,100,200,400,full")]
        sizes: String,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Geojson,
    Csv,
}

#[derive(Subcommand)]
enum MapCmd {
    Oddmswc {
        #[arg(long)]
        preds: PathBuf,
        /// CSV `region_id,grid` naming each region's grid CSV. With it, grid
        /// tiles lacking a prediction or below `--min-valid` are not analyzed.
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, default_value_t = wastemap::DEFAULT_MIN_VALID_FRACTION)]
        min_valid: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Export {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Geojson)]
        format: Format,
        #[arg(long)]
        waste_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorrCmd {
    Run {
        #[arg(long)]
        summary: PathBuf,
        /// Comma-separated `name=path[:mean|sum|density]`.
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<String>,
        /// Region outlines (GeoJSON with `region_id`), needed for raster layers.
        #[arg(long)]
        regions: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    Make {
        #[arg(long)]
        rows: u32,
        #[arg(long)]
        cols: u32,
        #[arg(long, default_value_t = 0)]
        plant: usize,
        #[arg(long, default_value_t = 0.05)]
        gsd: f64,
        #[arg(long, default_value_t = 5.0)]
        tile_size: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        region: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated stage list (overrides run.stages).
    #[arg(long, value_delimiter = ',')]
    stages: Vec<Stage>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Input raster as `region_id=path` (repeatable; replaces config inputs).
    #[arg(long = "input", value_name = "REGION=PATH")]
    inputs: Vec<String>,
}

fn init_logging(format: LogFormat, filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    match format {
        LogFormat::Json => builder.json().init(),
        LogFormat::Text => builder.init(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.log_format, &cli.log);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Error>().map_or(3, Error::exit_code);
            let msg = error_chain(&e);
            tracing::error!(exit_code = code, "{msg}");
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}

/// Joins the error chain, dropping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let m = cause.to_string();
        if !out.ends_with(&m) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&m);
        }
    }
    out
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_grid(raster: &RasterDataset, grid: Option<&Path>) -> dumpscan_core::Result<Grid> {
    match grid {
        Some(p) => geogrid::read_grid_csv(p),
        None => geogrid::make_grid(raster.meta(), &GridSpec::default()),
    }
}

fn load_labels(src: &LabelSource) -> anyhow::Result<dataset::ImportResult> {
    let geo = src
        .labels
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("geojson") || e.eq_ignore_ascii_case("json"));
    if geo {
        let grid_path = src
            .grid
            .as_ref()
            .ok_or_else(|| Error::Config("GeoJSON annotations need --grid".into()))?;
        let grid: Grid = geogrid::read_grid_csv(grid_path)?;
        Ok(dataset::import_annotations_geojson(&src.labels, &grid, src.region.as_deref(), !src.grid_crs)?)
    } else {
        Ok(dataset::import_annotations(&src.labels)?)
    }
}

fn backend(kind: Backend, model: Option<&Path>, marker_fraction: f64) -> anyhow::Result<Box<dyn ClassifierBackend>> {
    match kind {
        Backend::Reference => Ok(Box::new(ReferenceClassifier::new(ReferenceParams {
            fraction: marker_fraction,
            ..Default::default()
        }))),
        #[cfg(feature = "onnx")]
        Backend::Onnx => {
            let m = model.ok_or_else(|| Error::Config("--backend onnx needs --model".into()))?;
            Ok(Box::new(infer::onnx::OnnxClassifier::load(m)?))
        }
        #[cfg(not(feature = "onnx"))]
        Backend::Onnx => {
            let _ = model;
            Err(Error::Config("this build has no ONNX support".into()).into())
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Ingest(IngestCmd::Search {
            bbox,
            max_gsd,
            min_area,
            endpoint,
            out,
        }) => {
            let bbox = ingest::parse_bbox(&bbox)?;
            let policy = AdmissionPolicy {
                max_gsd_m: max_gsd,
                min_area_km2: min_area,
            };
            let entries = CatalogClient::new(endpoint).search(&bbox, &policy)?;
            tracing::info!(admitted = entries.len(), "catalog search finished");
            match out {
                Some(p) => write_json(&p, &entries)?,
                None => print_json(&entries)?,
            }
        }
        Command::Ingest(IngestCmd::Fetch { oam_id, out, endpoint }) => {
            let f = CatalogClient::new(endpoint).fetch(&oam_id, &out)?;
            print_json(&serde_json::json!({
                "path": f.path,
                "sha256": f.sha256,
                "cached": f.cached,
                "oam_id": f.entry.oam_id,
            }))?;
        }
        Command::Grid(GridCmd::Make {
            raster,
            out,
            tile_size,
            include_partials,
            geojson,
        }) => {
            let ds = RasterDataset::open(&raster)?;
            let spec = GridSpec {
                tile_size_m: tile_size,
                include_partials,
                ..Default::default()
            };
            let g = geogrid::make_grid(ds.meta(), &spec)?;
            geogrid::write_grid_csv(&g, &out)?;
            if let Some(p) = geojson {
                geogrid::write_grid_geojson(&g, p)?;
            }
            tracing::info!(tiles = g.len(), rows = g.n_rows, cols = g.n_cols, crs = %g.working_crs, "grid written");
        }
        Command::Tiles(TilesCmd::Extract {
            raster,
            grid,
            out,
            only,
            region,
            batch_size,
            workers,
        }) => {
            let ds = RasterDataset::open(&raster)?;
            let g: Grid = geogrid::read_grid_csv(&grid)?;
            let selected = match &only {
                Some(p) => {
                    let keep: std::collections::HashSet<_> = dataset::import_annotations(p)?
                        .records
                        .into_iter()
                        .filter(|r| region.as_deref().is_none_or(|id| r.region_id == id))
                        .map(|r| r.tile_id)
                        .collect();
                    g.tiles.iter().filter(|t| keep.contains(&t.tile_id)).cloned().collect()
                }
                None => g.tiles.clone(),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let opts = ExtractOptions {
                batch_size,
                workers,
                ..Default::default()
            };
            let mut stream = tiles::extract_batch(&ds, &selected, opts)?;
            let mut n = 0;
            for batch in stream.by_ref() {
                for t in batch? {
                    t.write_png(out.join(format!("{}_{}.png", t.tile_id.row, t.tile_id.col)))?;
                    n += 1;
                }
            }
            tracing::info!(written = n, skipped = stream.skipped().len(), "tiles extracted");
        }
        Command::Dataset(DatasetCmd::Import { src, out }) => {
            let imported = load_labels(&src)?;
            if let Some(p) = out {
                let mut s = String::from("region_id,row,col,label\n");
                for r in &imported.records {
                    s.push_str(&format!("{},{},{},{}\n", r.region_id, r.tile_id.row, r.tile_id.col, r.label));
                }
                std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
            }
            print_json(&serde_json::json!({
                "records": imported.records.len(),
                "duplicates_dropped": imported.duplicates,
                "balance": imported.balance,
            }))?;
        }
        Command::Dataset(DatasetCmd::Split { src, ratios, seed, out }) => {
            let ratios = dataset::parse_ratios(&ratios)?;
            let imported = load_labels(&src)?;
            let (manifest, warnings) = dataset::make_splits(&imported.records, ratios, seed)?;
            dataset::export_manifest(&manifest, &out)?;
            print_json(&serde_json::json!({
                "records": manifest.records.len(),
                "train": manifest.count(dataset::Split::Train),
                "val": manifest.count(dataset::Split::Val),
                "test": manifest.count(dataset::Split::Test),
                "warnings": warnings,
            }))?;
        }
        Command::Infer(InferCmd::Run {
            raster,
            grid,
            backend: kind,
            model,
            region,
            out,
            batch_size,
            workers,
            checkpoint,
            checkpoint_every,
            marker_fraction,
        }) => {
            let b = backend(kind, model.as_deref(), marker_fraction)?;
            let ds = RasterDataset::open(&raster)?;
            let g = load_grid(&ds, grid.as_deref())?;
            let opts = InferOptions {
                batch_size,
                workers,
                checkpoint,
                checkpoint_every,
            };
            let t0 = std::time::Instant::now();
            let res = infer::run_inference(&ds, &g.tiles, b.as_ref(), &opts)?;
            let secs = t0.elapsed().as_secs_f64();
            let rows: Vec<_> = res.predictions.iter().map(|p| p.to_row(&region)).collect();
            records::write_predictions_csv(&out, &rows)?;
            tracing::info!(
                predictions = rows.len(),
                skipped = res.skipped.len(),
                tiles_per_second = rows.len() as f64 / secs.max(1e-9),
                "inference finished"
            );
        }
        Command::Eval(EvalCmd::Metrics {
            preds,
            truth,
            out,
            markdown,
        }) => {
            let p = records::read_predictions_csv(&preds)?;
            let t = records::read_predictions_csv(&truth)?;
            let report = evalsuite::evaluate(&p, &t)?;
            if let Some(md) = markdown {
                std::fs::write(&md, report.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
            }
            match out {
                Some(o) => write_json(&o, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Eval(EvalCmd::Bootstrap {
            preds,
            truth,
            sizes,
            replicates,
            seed,
            out,
        }) => {
            let p = records::read_predictions_csv(&preds)?;
            let t = records::read_predictions_csv(&truth)?;
            let (scores, positive) = evalsuite::joined_scores(&p, &t)?;
            let sizes = evalsuite::parse_sizes(&sizes, scores.len())?;
            let curve = evalsuite::bootstrap_curves(&scores, &positive, &sizes, replicates, seed)?;
            curve.write_csv(&out)?;
        }
        Command::Map(MapCmd::Oddmswc {
            preds,
            regions,
            min_valid,
            out,
        }) => {
            let rows = records::read_predictions_csv(&preds)?;
            let summaries = match regions {
                None => wastemap::summarize_predictions::<f64>(&rows)?,
                Some(list) => region_scores(&list, &rows, min_valid)?,
            };
            let ranked = wastemap::rank_regions(summaries);
            wastemap::write_summary_csv(&ranked, &out)?;
            tracing::info!(regions = ranked.len(), "summary written");
        }
        Command::Map(MapCmd::Export {
            grid,
            preds,
            format,
            waste_only,
            out,
        }) => {
            let g: Grid = geogrid::read_grid_csv(&grid)?;
            let rows = records::read_predictions_csv(&preds)?;
            let fmt = match format {
                Format::Geojson => MapFormat::GeoJson,
                Format::Csv => MapFormat::Csv,
            };
            let n = wastemap::export_map(&g, &rows, &out, fmt, waste_only)?;
            tracing::info!(features = n, "map written");
        }
        Command::Corr(CorrCmd::Run {
            summary,
            layers,
            regions,
            exclude,
            out,
        }) => {
            let summaries = wastemap::read_summary_csv::<f64>(&summary)?;
            let extents = match &regions {
                Some(p) => sociocorr::read_regions_geojson(p)?,
                None => Vec::new(),
            };
            let mut values = Vec::new();
            for spec in &layers {
                let layer = IndicatorLayer::parse(spec)?;
                if matches!(layer.source, sociocorr::LayerSource::Raster { .. }) && regions.is_none() {
                    return Err(Error::Config(format!("raster layer `{}` needs --regions", layer.name)).into());
                }
                values.push((layer.name.clone(), sociocorr::layer_values::<f64>(&layer, &extents)?));
            }
            let report = sociocorr::sensitivity_exclude(&summaries, &values, &exclude)?;
            report.write(&out)?;
            print_json(&report.to_json())?;
        }
        Command::Synth(SynthCmd::Make {
            rows,
            cols,
            plant,
            gsd,
            tile_size,
            seed,
            region,
            out,
        }) => {
            let mut plan = PlantingPlan::new(rows, cols, gsd, seed);
            plan.tile_size_m = tile_size;
            plan.region_id = region;
            plan.validate()?;
            let plan = plan.plant_random(plant)?;
            let fx = synthbench::make_fixture(&plan, &out)?;
            print_json(&serde_json::json!({
                "raster": fx.raster,
                "truth": fx.truth,
                "plan": fx.plan,
                "planted": plan.planted.len(),
                "expected_oddmswc": plan.expected_oddmswc::<f64>(),
            }))?;
        }
        Command::Run(args) => {
            let mut cfg = match &args.config {
                Some(p) => RunConfig::load(p, &args.overrides)?,
                None => {
                    let mut c = RunConfig::from_toml("", &args.overrides)?;
                    c.resolve_paths(&std::env::current_dir()?);
                    c
                }
            };
            if !args.stages.is_empty() {
                cfg.run.stages = args.stages.clone();
            }
            if args.workers.is_some() {
                cfg.run.workers = args.workers;
            }
            if let Some(d) = args.out_dir {
                cfg.run.out_dir = d;
            }
            if args.name.is_some() {
                cfg.run.name = args.name;
            }
            if !args.inputs.is_empty() {
                cfg.inputs = args
                    .inputs
                    .iter()
                    .map(|s| {
                        let (id, p) = s
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("--input `{s}`: expected region_id=path")))?;
                        Ok(pipeline::InputSpec {
                            region_id: id.to_string(),
                            raster: PathBuf::from(p),
                        })
                    })
                    .collect::<anyhow::Result<_>>()?;
            }
            let report = pipeline::run_pipeline(&cfg)?;
            print_json(&serde_json::json!({
                "run_dir": report.run_dir,
                "stages": report.stages,
                "artifacts": report.artifacts.len(),
                "summary": report.summaries,
            }))?;
        }
    }
    Ok(())
}

/// Scores regions using their grids, so unpredicted (skipped) tiles and
/// low-coverage tiles stay out of the denominator.
fn region_scores(
    list: &Path,
    rows: &[records::PredictionRow],
    min_valid: f64,
) -> anyhow::Result<Vec<dumpscan_core::RegionSummary>> {
    let text = std::fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut by_region: BTreeMap<&str, BTreeMap<_, _>> = BTreeMap::new();
    for r in rows {
        by_region.entry(r.key.region_id.as_str()).or_default().insert(r.key.tile, r.class);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, grid) = line
            .split_once(',')
            .ok_or_else(|| anyhow!("{}: line {} is not `region_id,grid`", list.display(), i + 1))?;
        let (id, grid) = (id.trim(), base.join(grid.trim()));
        let g: Grid = geogrid::read_grid_csv(&grid)?;
        let preds = by_region.remove(id).unwrap_or_default();
        if let Some(stray) = preds.keys().find(|t| g.get(**t).is_none()) {
            bail!(Error::Join(format!("prediction {id}:{stray} is outside grid {}", grid.display())));
        }
        let outcomes = g.tiles.iter().map(|t| TileOutcome {
            prediction: preds.get(&t.tile_id).copied(),
            valid_fraction: t.valid_fraction,
        });
        out.push(wastemap::oddmswc(id, outcomes, min_valid)?);
    }
    if let Some(id) = by_region.keys().next() {
        bail!(Error::Join(format!("region {id} has predictions but no grid in {}", list.display())));
    }
    Ok(out)
}
