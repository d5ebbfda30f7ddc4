//! Benchmark harness: dataset manifests, scoring against ground truth,
//! per-category aggregation, results CSV and plot data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::geo::{
    categorize_area, footprint_area_km2, haversine_km, AreaCategory, CameraOptics, GeoPoint,
};
use crate::metadata::SensorTable;
use crate::result::{MatchResult, Pipeline};

pub const MANIFEST_HEADER: &str =
    "image_id,image_path,iss_lat,iss_lon,gt_lat,gt_lon,camera_model,focal_length_mm,altitude_km,area_km2,aliases";
pub const RESULTS_HEADER: &str =
    "image_id,pipeline,rank,pred_lat,pred_lon,score,place_names,runtime_s";
pub const DEFAULT_THRESHOLD_KM: f64 = 50.0;
pub const UNCATEGORIZED: &str = "uncategorized";

#[derive(Debug, Error)]
pub enum BenchError {
    /// `row` is the 1-based data row, not counting the header.
    #[error("manifest row {row}: {reason}")]
    ManifestParse { row: usize, reason: String },
    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),
    #[error("result for unknown image_id {0:?}")]
    UnknownImageId(String),
    #[error("results CSV line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
    #[error("result cannot be written: {0}")]
    InvalidResult(String),
    #[error("invalid threshold {0} km")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BenchError {
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::ManifestParse { .. } => "ManifestParseError",
            BenchError::DuplicateImageId(_) => "DuplicateImageId",
            BenchError::UnknownImageId(_) => "UnknownImageId",
            BenchError::CsvParse { .. } => "CsvParseError",
            BenchError::InvalidResult(_) => "InvalidResult",
            BenchError::InvalidThreshold(_) => "InvalidThreshold",
            BenchError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub iss: GeoPoint,
    pub ground_truth: GeoPoint,
    pub camera_model: Option<String>,
    pub focal_length_mm: Option<f64>,
    pub altitude_km: Option<f64>,
    pub area_km2: Option<f64>,
    /// Accepted names of the ground-truth place, for name scoring.
    pub aliases: Vec<String>,
    /// `None` means uncategorized.
    pub area_category: Option<AreaCategory>,
}

impl BenchmarkRecord {
    pub fn new(image_id: impl Into<String>, iss: GeoPoint, ground_truth: GeoPoint) -> Self {
        Self {
            image_id: image_id.into(),
            image_path: PathBuf::new(),
            iss,
            ground_truth,
            camera_model: None,
            focal_length_mm: None,
            altitude_km: None,
            area_km2: None,
            aliases: Vec::new(),
            area_category: None,
        }
    }

    /// Footprint area from the optics when the camera is known, otherwise
    /// the manifest's own area column.
    pub fn derive_category(&mut self, sensors: &SensorTable) {
        let from_optics = match (&self.camera_model, self.focal_length_mm) {
            (Some(model), Some(f)) => sensors.lookup(model).ok().and_then(|s| {
                let mut optics =
                    CameraOptics::new(f, s.sensor_width_mm, s.sensor_height_mm).ok()?;
                if self.altitude_km.is_some() {
                    optics = optics.with_altitude(self.altitude_km);
                }
                footprint_area_km2(&optics).ok()
            }),
            _ => None,
        };
        self.area_category = from_optics
            .or(self.area_km2)
            .and_then(|a| categorize_area(a).ok());
    }

    pub fn category_label(&self) -> &'static str {
        self.area_category.map_or(UNCATEGORIZED, |c| c.label())
    }
}

fn optional(s: &str) -> Option<&str> {
    let t = s.trim();
    (!t.is_empty()).then_some(t)
}

/// Parses manifest text. Relative image paths are resolved against `base_dir`.
pub fn parse_manifest(
    text: &str,
    base_dir: &Path,
    sensors: &SensorTable,
) -> Result<Vec<BenchmarkRecord>, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| BenchError::ManifestParse {
            row: 0,
            reason: e.to_string(),
        })?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",");
    if header.trim_start_matches('\u{feff}') != MANIFEST_HEADER {
        return Err(BenchError::ManifestParse {
            row: 0,
            reason: format!("header must be `{MANIFEST_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let bad = |reason: String| BenchError::ManifestParse { row, reason };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 11 {
            return Err(bad(format!("expected 11 fields, got {}", rec.len())));
        }
        let number = |idx: usize, name: &str| -> Result<Option<f64>, BenchError> {
            match optional(&rec[idx]) {
                None => Ok(None),
                Some(s) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Some)
                    .ok_or_else(|| bad(format!("{name}: bad number {s:?}"))),
            }
        };
        let point = |lat_idx: usize, what: &str| -> Result<GeoPoint, BenchError> {
            let lat = number(lat_idx, &format!("{what}_lat"))?
                .ok_or_else(|| bad(format!("{what}_lat missing")))?;
            let lon = number(lat_idx + 1, &format!("{what}_lon"))?
                .ok_or_else(|| bad(format!("{what}_lon missing")))?;
            GeoPoint::new(lat, lon).map_err(|e| bad(format!("{what}: {e}")))
        };
        let image_id = optional(&rec[0])
            .ok_or_else(|| bad("image_id missing".into()))?
            .to_string();
        let iss = point(2, "iss")?;
        let ground_truth = point(4, "gt")?;
        let focal_length_mm = number(7, "focal_length_mm")?;
        let altitude_km = number(8, "altitude_km")?;
        let area_km2 = number(9, "area_km2")?;
        if let Some(a) = area_km2.filter(|a| *a < 0.0) {
            return Err(bad(format!("area_km2 must be non-negative, got {a}")));
        }
        if !seen.insert(image_id.clone()) {
            return Err(BenchError::DuplicateImageId(image_id));
        }
        let path = PathBuf::from(rec[1].trim());
        let mut record = BenchmarkRecord {
            image_id,
            image_path: if path.is_relative() && !path.as_os_str().is_empty() {
                base_dir.join(path)
            } else {
                path
            },
            iss,
            ground_truth,
            camera_model: optional(&rec[6]).map(str::to_string),
            focal_length_mm,
            altitude_km,
            area_km2,
            aliases: rec[10]
                .split(';')
                .filter_map(optional)
                .map(str::to_string)
                .collect(),
            area_category: None,
        };
        record.derive_category(sensors);
        out.push(record);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<BenchmarkRecord>, BenchError> {
    load_manifest_with(path, &SensorTable::bundled())
}

pub fn load_manifest_with(
    path: &Path,
    sensors: &SensorTable,
) -> Result<Vec<BenchmarkRecord>, BenchError> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")), sensors)
}

/// How a result is judged against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoringMode {
    /// Distance when coordinates are present, otherwise names.
    #[default]
    Auto,
    Distance,
    Name,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoredBy {
    Distance,
    Name,
}

impl ScoredBy {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoredBy::Distance => "distance",
            ScoredBy::Name => "name",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold_km: f64,
    pub consider_top2: bool,
    pub mode: ScoringMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold_km: DEFAULT_THRESHOLD_KM,
            consider_top2: false,
            mode: ScoringMode::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordOutcome {
    pub image_id: String,
    /// Distance of the best-ranked considered prediction with coordinates.
    pub distance_km: Option<f64>,
    pub success: bool,
    pub mode: ScoredBy,
}

/// Scored records in manifest order. Every record is scored; a record with
/// no usable result is a failure.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold_km: f64,
    pub consider_top2: bool,
    pub outcomes: Vec<RecordOutcome>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success).count()
    }

    pub fn scored(&self) -> usize {
        self.outcomes.len()
    }

    pub fn success_rate(&self) -> String {
        format_rate(self.successes(), self.scored())
    }

    pub fn summary_line(&self) -> String {
        rate_line("overall", self.successes(), self.scored())
    }
}

/// `num/den` as a percentage with two decimals, rounded half up using
/// integer arithmetic. `"n/a"` when `den` is zero.
pub fn format_rate(num: usize, den: usize) -> String {
    if den == 0 {
        return "n/a".to_string();
    }
    let (num, den) = (num as u128, den as u128);
    let hundredths = (num * 20_000 + den) / (2 * den);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn rate_line(label: &str, num: usize, den: usize) -> String {
    let rate = format_rate(num, den);
    if den == 0 {
        format!("{label} {num}/{den} ({rate})")
    } else {
        format!("{label} {num}/{den} ({rate}%)")
    }
}

fn name_matches(result: &MatchResult, aliases: &[String]) -> bool {
    let folded: Vec<String> = aliases.iter().map(|a| a.trim().to_lowercase()).collect();
    result
        .place_names
        .iter()
        .any(|n| folded.contains(&n.trim().to_lowercase()))
}

pub fn evaluate(
    results: &[MatchResult],
    records: &[BenchmarkRecord],
    threshold_km: f64,
    consider_top2: bool,
) -> Result<EvalReport, BenchError> {
    evaluate_with(
        results,
        records,
        &EvalOptions {
            threshold_km,
            consider_top2,
            ..EvalOptions::default()
        },
    )
}

pub fn evaluate_with(
    results: &[MatchResult],
    records: &[BenchmarkRecord],
    opts: &EvalOptions,
) -> Result<EvalReport, BenchError> {
    if !(opts.threshold_km >= 0.0) {
        return Err(BenchError::InvalidThreshold(opts.threshold_km));
    }
    let index: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.image_id.as_str(), i))
        .collect();
    let mut per_record: Vec<Vec<&MatchResult>> = vec![Vec::new(); records.len()];
    for r in results {
        let i = *index
            .get(r.image_id.as_str())
            .ok_or_else(|| BenchError::UnknownImageId(r.image_id.clone()))?;
        per_record[i].push(r);
    }
    let outcomes = records
        .iter()
        .zip(per_record)
        .map(|(record, mut rs)| {
            rs.retain(|r| r.rank == 1 || (opts.consider_top2 && r.rank == 2));
            rs.sort_by_key(|r| r.rank);
            let mut outcome = RecordOutcome {
                image_id: record.image_id.clone(),
                distance_km: None,
                success: false,
                mode: ScoredBy::Distance,
            };
            let mut mode_set = false;
            for r in rs {
                if r.is_unresolved() {
                    continue;
                }
                let by_distance = match opts.mode {
                    ScoringMode::Distance => true,
                    ScoringMode::Name => false,
                    ScoringMode::Auto => r.predicted.is_some(),
                };
                let (ok, by) = if by_distance {
                    let d = r.predicted.map(|p| haversine_km(p, record.ground_truth));
                    if outcome.distance_km.is_none() {
                        outcome.distance_km = d;
                    }
                    (
                        d.is_some_and(|d| d <= opts.threshold_km),
                        ScoredBy::Distance,
                    )
                } else {
                    (name_matches(r, &record.aliases), ScoredBy::Name)
                };
                if !mode_set || (ok && !outcome.success) {
                    outcome.mode = by;
                    mode_set = true;
                }
                outcome.success |= ok;
            }
            outcome
        })
        .collect();
    Ok(EvalReport {
        threshold_km: opts.threshold_km,
        consider_top2: opts.consider_top2,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRow {
    pub label: String,
    pub count: usize,
    pub successes: usize,
}

impl CategoryRow {
    pub fn rate(&self) -> String {
        format_rate(self.successes, self.count)
    }
}

impl fmt::Display for CategoryRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&rate_line(&self.label, self.successes, self.count))
    }
}

/// Rows for every area bucket in lower-edge order, then `uncategorized`
/// when any record lacks a category, then `overall`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTable {
    pub rows: Vec<CategoryRow>,
}

impl CategoryTable {
    pub fn overall(&self) -> &CategoryRow {
        self.rows.last().expect("overall row is always present")
    }

    pub fn get(&self, label: &str) -> Option<&CategoryRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

impl fmt::Display for CategoryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.rows {
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

pub fn aggregate_by_category(report: &EvalReport, records: &[BenchmarkRecord]) -> CategoryTable {
    let success: HashMap<&str, bool> = report
        .outcomes
        .iter()
        .map(|o| (o.image_id.as_str(), o.success))
        .collect();
    let mut buckets: BTreeMap<Option<AreaCategory>, (usize, usize)> = AreaCategory::ALL
        .into_iter()
        .map(|c| (Some(c), (0, 0)))
        .collect();
    let (mut total, mut hits) = (0, 0);
    for r in records {
        let ok = success.get(r.image_id.as_str()).copied().unwrap_or(false);
        let e = buckets.entry(r.area_category).or_default();
        e.0 += 1;
        e.1 += ok as usize;
        total += 1;
        hits += ok as usize;
    }
    let mut rows: Vec<CategoryRow> = AreaCategory::ALL
        .into_iter()
        .map(|c| {
            let (count, successes) = buckets[&Some(c)];
            CategoryRow {
                label: c.label().to_string(),
                count,
                successes,
            }
        })
        .collect();
    if let Some(&(count, successes)) = buckets.get(&None) {
        rows.push(CategoryRow {
            label: UNCATEGORIZED.to_string(),
            count,
            successes,
        });
    }
    rows.push(CategoryRow {
        label: "overall".to_string(),
        count: total,
        successes: hits,
    });
    CategoryTable { rows }
}

/// Quotes a CSV field when it holds a delimiter, quote or line break.
fn csv_field(s: &str) -> String {
    if s.contains([',', ';', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn results_to_csv(results: &[MatchResult]) -> Result<String, BenchError> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        if r.place_names
            .iter()
            .any(|n| n.is_empty() || n.contains(';'))
        {
            return Err(BenchError::InvalidResult(format!(
                "{}: place names must be non-empty and free of ';'",
                r.image_id
            )));
        }
        let (lat, lon) = r.predicted.map_or((String::new(), String::new()), |p| {
            (format!("{:.6}", p.lat), format!("{:.6}", p.lon))
        });
        let fields = [
            csv_field(&r.image_id),
            r.pipeline.to_string(),
            r.rank.to_string(),
            lat,
            lon,
            r.score.to_string(),
            csv_field(&r.place_names.join(";")),
            r.runtime_s.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_results_csv(results: &[MatchResult], path: &Path) -> Result<(), BenchError> {
    Ok(atomic_write(path, results_to_csv(results)?.as_bytes())?)
}

pub fn parse_results_csv(text: &str) -> Result<Vec<MatchResult>, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| BenchError::CsvParse {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != RESULTS_HEADER {
        return Err(BenchError::CsvParse {
            line: 1,
            reason: format!("header must be `{RESULTS_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| BenchError::CsvParse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: String| BenchError::CsvParse { line, reason };
        if rec.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", rec.len())));
        }
        let float = |i: usize, name: &str| -> Result<f64, BenchError> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("{name}: bad number {:?}", &rec[i])))
        };
        let pipeline: Pipeline = rec[1].parse().map_err(bad)?;
        let rank: u8 = match &rec[2] {
            "1" => 1,
            "2" => 2,
            other => return Err(bad(format!("rank must be 1 or 2, got {other:?}"))),
        };
        let predicted = match (rec[3].is_empty(), rec[4].is_empty()) {
            (true, true) => None,
            (false, false) => Some(
                GeoPoint::new(float(3, "pred_lat")?, float(4, "pred_lon")?)
                    .map_err(|e| bad(e.to_string()))?,
            ),
            _ => {
                return Err(bad(
                    "pred_lat and pred_lon must both be present or both empty".into(),
                ))
            }
        };
        out.push(MatchResult {
            image_id: rec[0].to_string(),
            pipeline,
            predicted,
            score: float(5, "score")?,
            rank,
            place_names: if rec[6].is_empty() {
                Vec::new()
            } else {
                rec[6].split(';').map(str::to_string).collect()
            },
            runtime_s: float(7, "runtime_s")?,
        });
    }
    Ok(out)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<MatchResult>, BenchError> {
    parse_results_csv(&std::fs::read_to_string(path)?)
}

pub fn area_histogram_csv(records: &[BenchmarkRecord]) -> String {
    let mut counts: BTreeMap<Option<AreaCategory>, usize> = AreaCategory::ALL
        .into_iter()
        .map(|c| (Some(c), 0))
        .collect();
    for r in records {
        *counts.entry(r.area_category).or_default() += 1;
    }
    let mut out = String::from("category,count\n");
    for c in AreaCategory::ALL {
        out.push_str(&format!("{},{}\n", csv_field(c.label()), counts[&Some(c)]));
    }
    if let Some(n) = counts.get(&None) {
        out.push_str(&format!("{UNCATEGORIZED},{n}\n"));
    }
    out
}

/// GeoJSON FeatureCollection: per record an `iss` point, a `footprint`
/// point and the line joining them.
pub fn distribution_geojson(
    records: &[BenchmarkRecord],
    report: Option<&EvalReport>,
) -> serde_json::Value {
    let success: HashMap<&str, bool> = report
        .map(|r| {
            r.outcomes
                .iter()
                .map(|o| (o.image_id.as_str(), o.success))
                .collect()
        })
        .unwrap_or_default();
    let mut features = Vec::with_capacity(records.len() * 3);
    for r in records {
        let iss = [r.iss.lon, r.iss.lat];
        let gt = [r.ground_truth.lon, r.ground_truth.lat];
        let mut footprint_props =
            json!({"image_id": r.image_id, "style": "footprint", "category": r.category_label()});
        if let Some(ok) = success.get(r.image_id.as_str()) {
            footprint_props["success"] = json!(ok);
        }
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": iss},
            "properties": {"image_id": r.image_id, "style": "iss"}
        }));
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": gt},
            "properties": footprint_props
        }));
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [iss, gt]},
            "properties": {"image_id": r.image_id, "style": "link"}
        }));
    }
    json!({"type": "FeatureCollection", "features": features})
}

pub fn emit_plot_data(
    records: &[BenchmarkRecord],
    report: Option<&EvalReport>,
    out_dir: &Path,
) -> Result<(), BenchError> {
    atomic_write(
        &out_dir.join("area_histogram.csv"),
        area_histogram_csv(records).as_bytes(),
    )?;
    let geojson =
        serde_json::to_string_pretty(&distribution_geojson(records, report)).expect("serializable");
    atomic_write(&out_dir.join("distribution.geojson"), geojson.as_bytes())?;
    Ok(())
}

/// Runs `f` over every record on a pool of `jobs` threads, keeping record
/// order in the output.
pub fn run_records<T, E, F>(records: &[BenchmarkRecord], jobs: usize, f: F) -> Vec<Result<T, E>>
where
    T: Send,
    E: Send,
    F: Fn(&BenchmarkRecord) -> Result<T, E> + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return records.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| records.par_iter().map(&f).collect()),
        Err(_) => records.iter().map(f).collect(),
    }
}
