//! `issgeo` command line: fetch AOIs, geolocate photos with any pipeline,
//! score results and emit plot data.
//!
//! [`run`] takes its environment, network transport and clock as arguments
//! so that tests can drive it without touching the network.

pub mod sidecar;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use issgeo::bench::{
    self, aggregate_by_category, emit_plot_data, evaluate_with, load_manifest, read_results_csv,
    write_results_csv, BenchmarkRecord, EvalOptions, EvalReport, RecordOutcome, ScoredBy,
    ScoringMode,
};
use issgeo::features::{nn_geolocate, CorrelationMode, ExtractorSpec, NnOptions};
use issgeo::fsutil::atomic_write;
use issgeo::geo::{aoi_bbox, aoi_for_extent, AoiGeometry, GeoPoint, MercatorContext};
use issgeo::net::{Clock, HttpTransport, OfflineTransport};
use issgeo::raster::RasterImage;
use issgeo::sift::{sift_geolocate, SiftMatchOptions};
use issgeo::tiles::{build_mosaic, ProviderConfig, StaticRequest, TileFetcher};
use issgeo::vlm::{
    vlm_geolocate, LiveBackend, LiveConfig, MockBackend, RecordingBackend, ReplayBackend,
    VlmBackend,
};
use issgeo::{MatchResult, Pipeline};

pub const ENV_TILE_ENDPOINT: &str = "ISSGEO_TILE_ENDPOINT";
pub const ENV_TILE_API_KEY: &str = "ISSGEO_TILE_API_KEY";

#[derive(Debug, Parser)]
#[command(
    name = "issgeo",
    version,
    about = "Geolocate astronaut photographs taken from the ISS"
)]
struct Cli {
    /// Never touch the network; only caches and fixtures are used.
    #[arg(long, global = true)]
    offline: bool,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Write zero runtimes so repeated runs produce identical files.
    #[arg(long, global = true)]
    no_timing: bool,
    /// No progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download and stitch the map imagery around a point.
    FetchAoi(FetchArgs),
    /// Locate photographs with one of the pipelines.
    Geolocate(GeolocateArgs),
    /// Score a results file against a manifest.
    Evaluate(EvaluateArgs),
    /// Write histogram and map data for a manifest.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct FetchArgs {
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    /// Fractional zoom of the AOI raster (with --width/--height).
    #[arg(long, conflicts_with = "extent_km")]
    zoom: Option<f64>,
    #[arg(long, default_value_t = 1024)]
    width: u32,
    #[arg(long, default_value_t = 1024)]
    height: u32,
    /// Ground extent of a square AOI; the zoom is derived from it and --width.
    #[arg(long)]
    extent_km: Option<f64>,
    /// Tile or static-map URL template (falls back to ISSGEO_TILE_ENDPOINT).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 256)]
    tile_px: u32,
    /// Requests per second.
    #[arg(long, default_value_t = 4.0)]
    rate_limit: f64,
    /// Defaults to `<out-dir>/tile-cache`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    fixture_dir: Option<PathBuf>,
    /// Request one static-map image instead of stitching tiles.
    #[arg(long)]
    static_map: bool,
    /// Base name of the `.png` and `.geom` outputs.
    #[arg(long, default_value = "aoi")]
    name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Replay,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CorrelationArg {
    Normalized,
    Raw,
    RawGlobal,
}

#[derive(Debug, Args)]
struct GeolocateArgs {
    #[arg(long)]
    pipeline: Pipeline,
    /// Single photo to locate.
    #[arg(long, conflicts_with = "manifest")]
    image: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    iss_lat: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    iss_lon: Option<f64>,
    /// Manifest whose rows are located (all, or only --image-id).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    image_id: Option<String>,
    /// AOI raster for nn and sift.
    #[arg(long)]
    aoi: Option<PathBuf>,
    /// Geometry sidecar; defaults to the AOI path with a `.geom` extension.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Directory of `<image_id>.png` AOIs for manifest runs.
    #[arg(long)]
    aoi_dir: Option<PathBuf>,
    /// identity, mean-pool[:N] or file:PATH.
    #[arg(long, default_value = "mean-pool:8")]
    extractor: String,
    #[arg(long, value_enum, default_value_t = CorrelationArg::Normalized)]
    correlation: CorrelationArg,
    /// SIFT window side in AOI pixels.
    #[arg(long)]
    window: Option<u32>,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long, default_value_t = issgeo::sift::DEFAULT_WATER_THRESHOLD)]
    water_threshold: f64,
    #[arg(long, default_value_t = issgeo::sift::DEFAULT_RATIO)]
    ratio: f32,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Replay transcript to read.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Canned answer for the mock backend.
    #[arg(long)]
    mock_text: Option<String>,
    /// Save every backend answer to this transcript.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Results CSV; defaults to `results_<pipeline>.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoringArg {
    Auto,
    Distance,
    Name,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = bench::DEFAULT_THRESHOLD_KM)]
    threshold_km: f64,
    /// Count a record as correct when its second-ranked result is.
    #[arg(long)]
    top2: bool,
    #[arg(long, value_enum, default_value_t = ScoringArg::Auto)]
    scoring: ScoringArg,
    /// Only score results of this pipeline.
    #[arg(long)]
    pipeline: Option<Pipeline>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `evaluation.json` written by `evaluate`.
    #[arg(long)]
    evaluation: Option<PathBuf>,
}

/// Everything the commands may reach outside the process.
pub struct Context<'a> {
    pub env: &'a dyn Fn(&str) -> Option<String>,
    pub transport: &'a dyn HttpTransport,
    pub clock: &'a dyn Clock,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] issgeo::Error),
    #[error("{0}")]
    Offline(String),
    #[error("{0}")]
    Geometry(String),
    #[error("{failed} of {total} images failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Lib(e) => e.kind(),
            CliError::Offline(_) => "OfflineViolation",
            CliError::Geometry(_) => "GeometryFileError",
            CliError::Partial { .. } => "PartialFailure",
        }
    }
}

macro_rules! lib_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Lib(e.into())
            }
        }
    )*};
}

lib_from!(
    issgeo::geo::GeoError,
    issgeo::raster::RasterError,
    issgeo::tiles::TileError,
    issgeo::features::FeatureError,
    issgeo::sift::SiftError,
    issgeo::vlm::VlmError,
    issgeo::bench::BenchError,
    std::io::Error
);

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 1 on expected errors and 2 on usage errors.
pub fn run<I, T>(args: I, ctx: &Context<'_>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let offline_transport = OfflineTransport::default();
    let transport: &dyn HttpTransport = if cli.offline {
        &offline_transport
    } else {
        ctx.transport
    };
    let ctx = Context {
        env: ctx.env,
        transport,
        clock: ctx.clock,
    };
    let result = match &cli.command {
        Command::FetchAoi(a) => fetch_aoi(&cli, a, &ctx, out),
        Command::Geolocate(a) => geolocate(&cli, a, &ctx, out, err),
        Command::Evaluate(a) => evaluate(&cli, a, out),
        Command::Report(a) => report(&cli, a, out),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nUsage: issgeo [OPTIONS] <COMMAND>\n\nFor more information, try '--help'.");
            2
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", e.kind());
            1
        }
    }
}

fn out_path(cli: &Cli, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        cli.out_dir.join(p)
    }
}

fn progress_printer(label: &'static str, quiet: bool) -> impl Fn(usize, usize) + Sync {
    move |done, total| {
        if !quiet && (done == total || done % 10 == 0) {
            eprintln!("{label} {done}/{total}");
        }
    }
}

fn fetch_aoi(
    cli: &Cli,
    a: &FetchArgs,
    ctx: &Context<'_>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let center = GeoPoint::new(a.lat, a.lon)?;
    let geom: AoiGeometry = match (a.zoom, a.extent_km) {
        (Some(z), None) => {
            let mctx = MercatorContext::new(z, a.tile_px)?;
            aoi_bbox(center, &mctx, f64::from(a.width), f64::from(a.height))?
        }
        (None, Some(km)) => aoi_for_extent(center, km, a.width, a.tile_px)?,
        _ => {
            return Err(CliError::Usage(
                "fetch-aoi needs --zoom or --extent-km".into(),
            ))
        }
    };
    let endpoint = a
        .endpoint
        .clone()
        .or_else(|| (ctx.env)(ENV_TILE_ENDPOINT))
        .unwrap_or_default();
    let cfg = ProviderConfig {
        endpoint_template: endpoint,
        api_key: (ctx.env)(ENV_TILE_API_KEY),
        tile_px: a.tile_px,
        rate_limit: a.rate_limit,
        cache_dir: Some(
            a.cache_dir
                .clone()
                .unwrap_or_else(|| cli.out_dir.join("tile-cache")),
        ),
        fixture_dir: a.fixture_dir.clone(),
        offline: cli.offline,
        jobs: usize::from(cli.jobs),
        ..ProviderConfig::default()
    };
    let progress = progress_printer("tiles", cli.quiet);
    let fetcher = TileFetcher::new(cfg, ctx.transport, ctx.clock)?.with_progress(&progress);
    let image = if a.static_map {
        fetcher.fetch_static(&StaticRequest::for_aoi(&geom))?
    } else {
        build_mosaic(&geom, &fetcher)?
    };
    let png = cli.out_dir.join(format!("{}.png", a.name));
    let geom_path = png.with_extension(sidecar::EXTENSION);
    atomic_write(&png, &image.encode_png()?)?;
    atomic_write(&geom_path, sidecar::render(&geom).as_bytes())?;
    let _ = writeln!(
        out,
        "wrote {} ({}x{}, zoom {:.4}, {:.4} km/px) and {}",
        png.display(),
        image.width(),
        image.height(),
        geom.context.zoom(),
        geom.km_per_px(),
        geom_path.display()
    );
    Ok(())
}

fn load_aoi(path: &Path, geometry: Option<&Path>) -> Result<(RasterImage, AoiGeometry), CliError> {
    let image = RasterImage::open(path)?;
    let geom_path = geometry
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.with_extension(sidecar::EXTENSION));
    let geom = sidecar::load(&geom_path).map_err(CliError::Geometry)?;
    Ok((image, geom))
}

fn make_backend<'a>(
    cli: &Cli,
    a: &GeolocateArgs,
    ctx: &'a Context<'a>,
) -> Result<Box<dyn VlmBackend + 'a>, CliError> {
    let kind = a
        .backend
        .ok_or_else(|| CliError::Usage("--pipeline vlm needs --backend mock|replay|live".into()))?;
    Ok(match kind {
        BackendKind::Mock => {
            Box::new(MockBackend::new(a.mock_text.clone().ok_or_else(|| {
                CliError::Usage("--backend mock needs --mock-text".into())
            })?))
        }
        BackendKind::Replay => {
            let path = a
                .transcript
                .as_ref()
                .ok_or_else(|| CliError::Usage("--backend replay needs --transcript".into()))?;
            Box::new(ReplayBackend::load(path)?)
        }
        BackendKind::Live => {
            let cfg = LiveConfig::from_env(|k| (ctx.env)(k))?;
            if cli.offline {
                return Err(CliError::Offline(
                    "the live backend is unavailable with --offline".into(),
                ));
            }
            Box::new(LiveBackend::new(cfg, ctx.transport, ctx.clock))
        }
    })
}

fn geolocate(
    cli: &Cli,
    a: &GeolocateArgs,
    ctx: &Context<'_>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let iss = match (a.iss_lat, a.iss_lon) {
        (Some(lat), Some(lon)) => Some(GeoPoint::new(lat, lon)?),
        (None, None) => None,
        _ => {
            return Err(CliError::Usage(
                "--iss-lat and --iss-lon go together".into(),
            ))
        }
    };
    let records: Vec<BenchmarkRecord> = match (&a.image, &a.manifest) {
        (Some(path), None) => {
            if a.pipeline == Pipeline::Vlm && iss.is_none() {
                return Err(CliError::Usage(
                    "--pipeline vlm needs --iss-lat and --iss-lon".into(),
                ));
            }
            let id = a.image_id.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into())
            });
            let p = iss.unwrap_or(GeoPoint::new(0.0, 0.0)?);
            let mut r = BenchmarkRecord::new(id, p, p);
            r.image_path = path.clone();
            vec![r]
        }
        (None, Some(manifest)) => {
            let mut recs = load_manifest(manifest)?;
            if let Some(id) = &a.image_id {
                recs.retain(|r| &r.image_id == id);
                if recs.is_empty() {
                    return Err(issgeo::bench::BenchError::UnknownImageId(id.clone()).into());
                }
            }
            recs
        }
        _ => {
            return Err(CliError::Usage(
                "geolocate needs exactly one of --image or --manifest".into(),
            ))
        }
    };

    // Parallelism goes across images when there are several, inside the
    // pipeline otherwise.
    let jobs = usize::from(cli.jobs);
    let (outer, inner) = if records.len() > 1 {
        (jobs, 1)
    } else {
        (1, jobs)
    };

    let per_record: Vec<Result<Vec<MatchResult>, CliError>> = match a.pipeline {
        Pipeline::Vlm => {
            let backend = make_backend(cli, a, ctx)?;
            let recorder = a.record.as_ref().map(|p| {
                let existing = ReplayBackend::load(p).unwrap_or_default();
                RecordingBackend::new(backend.as_ref(), existing)
            });
            let active: &dyn VlmBackend = match &recorder {
                Some(r) => r,
                None => backend.as_ref(),
            };
            let results = bench::run_records(&records, outer, |r| {
                vlm_geolocate(r, active)
                    .map(|m| vec![m.result])
                    .map_err(CliError::from)
            });
            if let (Some(rec), Some(path)) = (&recorder, &a.record) {
                rec.transcript().save(path)?;
            }
            results
        }
        Pipeline::Nn | Pipeline::Sift => {
            let shared = match &a.aoi {
                Some(p) => Some(load_aoi(p, a.geometry.as_deref())?),
                None if a.aoi_dir.is_none() => {
                    return Err(CliError::Usage(format!(
                        "--pipeline {} needs --aoi or --aoi-dir",
                        a.pipeline
                    )))
                }
                None => None,
            };
            let spec: ExtractorSpec = a
                .extractor
                .parse()
                .map_err(|e: issgeo::features::FeatureError| CliError::Usage(e.to_string()))?;
            let nn_opts = NnOptions {
                mode: match a.correlation {
                    CorrelationArg::Normalized => CorrelationMode::Normalized,
                    CorrelationArg::Raw => CorrelationMode::Raw,
                    CorrelationArg::RawGlobal => CorrelationMode::RawGlobalMean,
                },
                ..NnOptions::default()
            };
            let sift_opts = SiftMatchOptions {
                ratio: a.ratio,
                water_threshold: a.water_threshold,
                window_px: a.window,
                stride_px: a.stride,
                jobs: inner,
                ..SiftMatchOptions::default()
            };
            let progress = progress_printer("windows", cli.quiet);
            bench::run_records(&records, outer, |r| {
                let owned;
                let (aoi, geom) = match &shared {
                    Some((img, g)) => (img, g),
                    None => {
                        let dir = a.aoi_dir.as_ref().expect("checked above");
                        owned = load_aoi(&dir.join(format!("{}.png", r.image_id)), None)?;
                        (&owned.0, &owned.1)
                    }
                };
                let query = RasterImage::open(&r.image_path)?;
                let mut results = if a.pipeline == Pipeline::Nn {
                    vec![nn_geolocate(&query, aoi, geom, &spec, &nn_opts)?.result]
                } else {
                    let p: Option<issgeo::sift::ProgressFn<'_>> =
                        (outer == 1).then_some(&progress as _);
                    sift_geolocate(&query, aoi, geom, &sift_opts, p)?.results
                };
                for m in &mut results {
                    m.image_id = r.image_id.clone();
                }
                Ok(results)
            })
        }
    };

    let mut rows = Vec::new();
    let mut failed = 0;
    for (record, outcome) in records.iter().zip(per_record) {
        match outcome {
            Ok(rs) => rows.extend(rs),
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "error: {}: {e} ({})", e.kind(), record.image_id);
                rows.push(MatchResult::new(record.image_id.clone(), a.pipeline, 1));
            }
        }
    }
    if cli.no_timing {
        for r in &mut rows {
            r.runtime_s = 0.0;
        }
    }
    let path = out_path(
        cli,
        a.output
            .as_deref()
            .unwrap_or(Path::new(&format!("results_{}.csv", a.pipeline))),
    );
    write_results_csv(&rows, &path)?;
    for r in rows.iter().filter(|r| r.rank == 1) {
        let at = r.predicted.map_or("unresolved".to_string(), |p| {
            format!("{:.6}, {:.6}", p.lat, p.lon)
        });
        let names = if r.place_names.is_empty() {
            String::new()
        } else {
            format!(" [{}]", r.place_names.join("; "))
        };
        let _ = writeln!(out, "{} {}: {at}{names}", r.image_id, r.pipeline);
    }
    let _ = writeln!(out, "wrote {} ({} rows)", path.display(), rows.len());
    if failed > 0 {
        return Err(CliError::Partial {
            failed,
            total: records.len(),
        });
    }
    Ok(())
}

fn scoring_mode(s: ScoringArg) -> ScoringMode {
    match s {
        ScoringArg::Auto => ScoringMode::Auto,
        ScoringArg::Distance => ScoringMode::Distance,
        ScoringArg::Name => ScoringMode::Name,
    }
}

fn evaluation_json(
    report: &EvalReport,
    table: &bench::CategoryTable,
    scoring: ScoringArg,
) -> serde_json::Value {
    let scoring = match scoring {
        ScoringArg::Auto => "auto",
        ScoringArg::Distance => "distance",
        ScoringArg::Name => "name",
    };
    json!({
        "threshold_km": report.threshold_km,
        "consider_top2": report.consider_top2,
        "scoring": scoring,
        "successes": report.successes(),
        "scored": report.scored(),
        "success_rate": report.success_rate(),
        "categories": table.rows.iter().map(|r| json!({
            "category": r.label,
            "count": r.count,
            "successes": r.successes,
            "rate": r.rate(),
        })).collect::<Vec<_>>(),
        "records": report.outcomes.iter().map(|o| json!({
            "image_id": o.image_id,
            "success": o.success,
            "mode": o.mode.as_str(),
            "distance_km": o.distance_km,
        })).collect::<Vec<_>>(),
    })
}

fn evaluate(cli: &Cli, a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let records = load_manifest(&a.manifest)?;
    let mut results = Vec::new();
    for p in &a.results {
        results.extend(read_results_csv(p)?);
    }
    if let Some(p) = a.pipeline {
        results.retain(|r| r.pipeline == p);
    } else if let Some(first) = results.first() {
        if results.iter().any(|r| r.pipeline != first.pipeline) {
            return Err(CliError::Usage(
                "results mix pipelines; choose one with --pipeline".into(),
            ));
        }
    }
    let opts = EvalOptions {
        threshold_km: a.threshold_km,
        consider_top2: a.top2,
        mode: scoring_mode(a.scoring),
    };
    let report = evaluate_with(&results, &records, &opts)?;
    let table = aggregate_by_category(&report, &records);
    let _ = writeln!(
        out,
        "threshold {} km, top-2 {}",
        a.threshold_km,
        if a.top2 { "on" } else { "off" }
    );
    let _ = write!(out, "{table}");
    let body = serde_json::to_string_pretty(&evaluation_json(&report, &table, a.scoring))
        .expect("serializable");
    atomic_write(
        &cli.out_dir.join("evaluation.json"),
        format!("{body}\n").as_bytes(),
    )?;
    Ok(())
}

fn read_evaluation(path: &Path) -> Result<EvalReport, CliError> {
    let bad = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let outcomes = v["records"]
        .as_array()
        .ok_or_else(|| bad("missing records".into()))?
        .iter()
        .map(|r| {
            Some(RecordOutcome {
                image_id: r["image_id"].as_str()?.to_string(),
                success: r["success"].as_bool()?,
                mode: if r["mode"] == "name" {
                    ScoredBy::Name
                } else {
                    ScoredBy::Distance
                },
                distance_km: r["distance_km"].as_f64(),
            })
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("malformed record entry".into()))?;
    Ok(EvalReport {
        threshold_km: v["threshold_km"]
            .as_f64()
            .unwrap_or(bench::DEFAULT_THRESHOLD_KM),
        consider_top2: v["consider_top2"].as_bool().unwrap_or(false),
        outcomes,
    })
}

fn report(cli: &Cli, a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let records = load_manifest(&a.manifest)?;
    let evaluation = a.evaluation.as_deref().map(read_evaluation).transpose()?;
    emit_plot_data(&records, evaluation.as_ref(), &cli.out_dir)?;
    let _ = write!(out, "{}", bench::area_histogram_csv(&records));
    let _ = writeln!(
        out,
        "wrote {} and {}",
        cli.out_dir.join("area_histogram.csv").display(),
        cli.out_dir.join("distribution.geojson").display()
    );
    Ok(())
}
