//! Capture metadata from JPEG/TIFF EXIF headers and camera sensor lookup.
//!
//! Only the handful of tags the pipelines need are decoded: camera model,
//! focal length, GPS position/altitude and capture time. Every read is
//! bounds-checked, so truncated or corrupt headers surface as
//! [`MetadataError::MalformedExif`] instead of panics.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error("not a JPEG or TIFF container")]
    UnsupportedContainer,
    #[error("malformed EXIF: {0}")]
    MalformedExif(String),
    #[error("unknown camera model {0:?}")]
    UnknownCamera(String),
    #[error("sensor table line {line}: {reason}")]
    SensorTable { line: usize, reason: String },
}

impl MetadataError {
    pub fn kind(&self) -> &'static str {
        match self {
            MetadataError::UnsupportedContainer => "UnsupportedContainer",
            MetadataError::MalformedExif(_) => "MalformedExif",
            MetadataError::UnknownCamera(_) => "UnknownCamera",
            MetadataError::SensorTable { .. } => "SensorTableError",
        }
    }
}

fn malformed(msg: impl Into<String>) -> MetadataError {
    MetadataError::MalformedExif(msg.into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptureMetadata {
    pub camera_model: Option<String>,
    pub focal_length_mm: Option<f64>,
    pub gps: Option<GeoPoint>,
    pub altitude_km: Option<f64>,
    pub timestamp: Option<DateTime<Utc>>,
}

/// Signed decimal degrees from degrees/minutes/seconds and a hemisphere
/// reference (`N`, `S`, `E`, `W`).
pub fn dms_to_decimal(degrees: f64, minutes: f64, seconds: f64, hemisphere: char) -> f64 {
    let magnitude = degrees + minutes / 60.0 + seconds / 3600.0;
    match hemisphere.to_ascii_uppercase() {
        'S' | 'W' => -magnitude,
        _ => magnitude,
    }
}

/// Splits an absolute decimal-degree value into `(degrees, minutes, seconds)`.
pub fn decimal_to_dms(value: f64) -> (u32, u32, f64) {
    let v = value.abs();
    let degrees = v.trunc();
    let minutes_full = (v - degrees) * 60.0;
    let minutes = minutes_full.trunc();
    let seconds = (minutes_full - minutes) * 60.0;
    (degrees as u32, minutes as u32, seconds)
}

pub fn read_metadata(path: &Path) -> Result<CaptureMetadata, MetadataError> {
    let bytes =
        std::fs::read(path).map_err(|e| malformed(format!("read {}: {e}", path.display())))?;
    parse_exif(&bytes)
}

/// Extracts capture metadata from a JPEG or TIFF byte stream.
pub fn parse_exif(bytes: &[u8]) -> Result<CaptureMetadata, MetadataError> {
    if bytes.len() >= 2 && bytes[0] == 0xFF && bytes[1] == 0xD8 {
        match find_jpeg_exif(bytes)? {
            Some(tiff) => parse_tiff(tiff),
            None => Ok(CaptureMetadata::default()),
        }
    } else if bytes.len() >= 4 && (&bytes[..4] == b"II*\0" || &bytes[..4] == b"MM\0*") {
        parse_tiff(bytes)
    } else if bytes.len() < 4
        && (b"II*\0".starts_with(bytes) || b"MM\0*".starts_with(bytes))
        && !bytes.is_empty()
    {
        Err(malformed("truncated TIFF header"))
    } else {
        Err(MetadataError::UnsupportedContainer)
    }
}

/// Returns the TIFF payload of the first `APP1 Exif` segment, if any.
fn find_jpeg_exif(bytes: &[u8]) -> Result<Option<&[u8]>, MetadataError> {
    let mut pos = 2;
    loop {
        // Fill bytes may precede a marker.
        while pos < bytes.len() && bytes[pos] == 0xFF && bytes.get(pos + 1) == Some(&0xFF) {
            pos += 1;
        }
        if pos + 4 > bytes.len() {
            return Err(malformed("truncated JPEG segment header"));
        }
        if bytes[pos] != 0xFF {
            return Err(malformed(format!("expected JPEG marker at byte {pos}")));
        }
        let marker = bytes[pos + 1];
        // Start of scan / end of image: no metadata segments follow.
        if marker == 0xDA || marker == 0xD9 {
            return Ok(None);
        }
        let len = usize::from(u16::from_be_bytes([bytes[pos + 2], bytes[pos + 3]]));
        if len < 2 {
            return Err(malformed("JPEG segment length < 2"));
        }
        let body_start = pos + 4;
        let body_end = pos + 2 + len;
        if body_end > bytes.len() {
            return Err(malformed("JPEG segment runs past end of data"));
        }
        let body = &bytes[body_start..body_end];
        if marker == 0xE1 && body.starts_with(b"Exif\0\0") {
            return Ok(Some(&body[6..]));
        }
        pos = body_end;
    }
}

#[derive(Clone, Copy)]
enum ByteOrder {
    Little,
    Big,
}

struct Tiff<'a> {
    data: &'a [u8],
    order: ByteOrder,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    tag: u16,
    kind: u16,
    count: u32,
    /// Offset of the value bytes inside the TIFF buffer.
    value_offset: usize,
}

const TYPE_BYTE: u16 = 1;
const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_RATIONAL: u16 = 5;
const TYPE_UNDEFINED: u16 = 7;
const TYPE_SRATIONAL: u16 = 10;

fn type_size(kind: u16) -> Option<usize> {
    match kind {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

impl<'a> Tiff<'a> {
    fn slice(&self, off: usize, len: usize) -> Result<&'a [u8], MetadataError> {
        off.checked_add(len)
            .and_then(|end| self.data.get(off..end))
            .ok_or_else(|| malformed(format!("read of {len} bytes at {off} past end")))
    }

    fn u16_at(&self, off: usize) -> Result<u16, MetadataError> {
        let b = self.slice(off, 2)?;
        Ok(match self.order {
            ByteOrder::Little => u16::from_le_bytes([b[0], b[1]]),
            ByteOrder::Big => u16::from_be_bytes([b[0], b[1]]),
        })
    }

    fn u32_at(&self, off: usize) -> Result<u32, MetadataError> {
        let b = self.slice(off, 4)?;
        let arr = [b[0], b[1], b[2], b[3]];
        Ok(match self.order {
            ByteOrder::Little => u32::from_le_bytes(arr),
            ByteOrder::Big => u32::from_be_bytes(arr),
        })
    }

    fn read_ifd(&self, off: usize) -> Result<Vec<Entry>, MetadataError> {
        let n = usize::from(self.u16_at(off)?);
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let e = off + 2 + 12 * i;
            let tag = self.u16_at(e)?;
            let kind = self.u16_at(e + 2)?;
            let count = self.u32_at(e + 4)?;
            let Some(size) = type_size(kind) else {
                // Unknown types are skipped, not fatal.
                continue;
            };
            let total = size
                .checked_mul(count as usize)
                .ok_or_else(|| malformed("tag value size overflow"))?;
            let value_offset = if total <= 4 {
                e + 8
            } else {
                self.u32_at(e + 8)? as usize
            };
            entries.push(Entry {
                tag,
                kind,
                count,
                value_offset,
            });
        }
        Ok(entries)
    }

    fn ascii(&self, e: &Entry) -> Result<String, MetadataError> {
        if e.kind != TYPE_ASCII {
            return Err(malformed(format!("tag {:#06x} is not ASCII", e.tag)));
        }
        let raw = self.slice(e.value_offset, e.count as usize)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
        Ok(String::from_utf8_lossy(&raw[..end]).trim().to_string())
    }

    fn rationals(&self, e: &Entry) -> Result<Vec<f64>, MetadataError> {
        if e.kind != TYPE_RATIONAL && e.kind != TYPE_SRATIONAL {
            return Err(malformed(format!("tag {:#06x} is not RATIONAL", e.tag)));
        }
        (0..e.count as usize)
            .map(|i| {
                let off = e.value_offset + 8 * i;
                let (n, d) = (self.u32_at(off)?, self.u32_at(off + 4)?);
                let (n, d) = if e.kind == TYPE_SRATIONAL {
                    (f64::from(n as i32), f64::from(d as i32))
                } else {
                    (f64::from(n), f64::from(d))
                };
                if d == 0.0 {
                    return Err(malformed(format!("zero denominator in tag {:#06x}", e.tag)));
                }
                Ok(n / d)
            })
            .collect()
    }

    fn first_byte(&self, e: &Entry) -> Result<u8, MetadataError> {
        match e.kind {
            TYPE_BYTE | TYPE_UNDEFINED | TYPE_ASCII => Ok(self.slice(e.value_offset, 1)?[0]),
            TYPE_SHORT => Ok(self.u16_at(e.value_offset)? as u8),
            _ => Err(malformed(format!(
                "tag {:#06x} has unexpected type {}",
                e.tag, e.kind
            ))),
        }
    }

    fn offset_value(&self, e: &Entry) -> Result<usize, MetadataError> {
        match e.kind {
            TYPE_LONG | 13 => Ok(self.u32_at(e.value_offset)? as usize),
            TYPE_SHORT => Ok(usize::from(self.u16_at(e.value_offset)?)),
            _ => Err(malformed(format!(
                "IFD pointer {:#06x} has type {}",
                e.tag, e.kind
            ))),
        }
    }
}

const TAG_MODEL: u16 = 0x0110;
const TAG_DATETIME: u16 = 0x0132;
const TAG_EXIF_IFD: u16 = 0x8769;
const TAG_GPS_IFD: u16 = 0x8825;
const TAG_DATETIME_ORIGINAL: u16 = 0x9003;
const TAG_FOCAL_LENGTH: u16 = 0x920A;
const GPS_LAT_REF: u16 = 1;
const GPS_LAT: u16 = 2;
const GPS_LON_REF: u16 = 3;
const GPS_LON: u16 = 4;
const GPS_ALT_REF: u16 = 5;
const GPS_ALT: u16 = 6;
const GPS_TIME: u16 = 7;
const GPS_DATE: u16 = 29;

fn find(entries: &[Entry], tag: u16) -> Option<&Entry> {
    entries.iter().find(|e| e.tag == tag)
}

fn parse_tiff(data: &[u8]) -> Result<CaptureMetadata, MetadataError> {
    if data.len() < 8 {
        return Err(malformed("truncated TIFF header"));
    }
    let order = match &data[..2] {
        b"II" => ByteOrder::Little,
        b"MM" => ByteOrder::Big,
        _ => return Err(malformed("bad TIFF byte-order mark")),
    };
    let tiff = Tiff { data, order };
    if tiff.u16_at(2)? != 42 {
        return Err(malformed("bad TIFF magic"));
    }
    let ifd0 = tiff.read_ifd(tiff.u32_at(4)? as usize)?;

    let mut meta = CaptureMetadata::default();
    if let Some(e) = find(&ifd0, TAG_MODEL) {
        let model = tiff.ascii(e)?;
        if !model.is_empty() {
            meta.camera_model = Some(model);
        }
    }
    let mut local_time = match find(&ifd0, TAG_DATETIME) {
        Some(e) => parse_exif_datetime(&tiff.ascii(e)?),
        None => None,
    };

    if let Some(ptr) = find(&ifd0, TAG_EXIF_IFD) {
        let exif = tiff.read_ifd(tiff.offset_value(ptr)?)?;
        if let Some(e) = find(&exif, TAG_FOCAL_LENGTH) {
            let focal = *tiff
                .rationals(e)?
                .first()
                .ok_or_else(|| malformed("empty focal length"))?;
            if !(focal > 0.0) {
                return Err(malformed(format!("non-positive focal length {focal}")));
            }
            meta.focal_length_mm = Some(focal);
        }
        if let Some(e) = find(&exif, TAG_DATETIME_ORIGINAL) {
            if let Some(t) = parse_exif_datetime(&tiff.ascii(e)?) {
                local_time = Some(t);
            }
        }
    }

    let mut gps_time = None;
    if let Some(ptr) = find(&ifd0, TAG_GPS_IFD) {
        let gps = tiff.read_ifd(tiff.offset_value(ptr)?)?;
        meta.gps = parse_gps_position(&tiff, &gps)?;
        if let Some(alt) = find(&gps, GPS_ALT) {
            let metres = *tiff
                .rationals(alt)?
                .first()
                .ok_or_else(|| malformed("empty altitude"))?;
            let below = match find(&gps, GPS_ALT_REF) {
                Some(r) => tiff.first_byte(r)? == 1,
                None => false,
            };
            meta.altitude_km = Some(if below { -metres } else { metres } / 1000.0);
        }
        if let (Some(d), Some(t)) = (find(&gps, GPS_DATE), find(&gps, GPS_TIME)) {
            let date = NaiveDate::parse_from_str(&tiff.ascii(d)?, "%Y:%m:%d").ok();
            let hms = tiff.rationals(t)?;
            if let (Some(date), [h, m, s]) = (date, hms.as_slice()) {
                let secs = (h * 3600.0 + m * 60.0 + s).round() as u32;
                gps_time = date
                    .and_hms_opt(secs / 3600, (secs / 60) % 60, secs % 60)
                    .map(|t| t.and_utc());
            }
        }
    }
    // GPS time is UTC by definition; camera clocks are taken as UTC.
    meta.timestamp = gps_time.or(local_time.map(|t| t.and_utc()));
    Ok(meta)
}

fn parse_exif_datetime(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), "%Y:%m:%d %H:%M:%S").ok()
}

fn parse_gps_position(tiff: &Tiff<'_>, gps: &[Entry]) -> Result<Option<GeoPoint>, MetadataError> {
    let coord = |value_tag: u16, ref_tag: u16| -> Result<Option<f64>, MetadataError> {
        let (Some(v), Some(r)) = (find(gps, value_tag), find(gps, ref_tag)) else {
            return Ok(None);
        };
        let parts = tiff.rationals(v)?;
        let [d, m, s] = parts.as_slice() else {
            return Err(malformed(format!("GPS tag {value_tag} needs 3 rationals")));
        };
        let hemisphere = tiff.first_byte(r)? as char;
        if !matches!(hemisphere.to_ascii_uppercase(), 'N' | 'S' | 'E' | 'W') {
            return Err(malformed(format!("bad GPS hemisphere {hemisphere:?}")));
        }
        Ok(Some(dms_to_decimal(*d, *m, *s, hemisphere)))
    };
    match (coord(GPS_LAT, GPS_LAT_REF)?, coord(GPS_LON, GPS_LON_REF)?) {
        (Some(lat), Some(lon)) => GeoPoint::new(lat, lon)
            .map(Some)
            .map_err(|e| malformed(format!("GPS position out of range: {e}"))),
        _ => Ok(None),
    }
}

/// Physical sensor size of one camera model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub camera_model: String,
    pub sensor_width_mm: f64,
    pub sensor_height_mm: f64,
}

/// Immutable camera-model → sensor-size table keyed by normalized model name.
#[derive(Debug, Clone, Default)]
pub struct SensorTable {
    rows: HashMap<String, SensorSpec>,
}

pub const SENSOR_TABLE_HEADER: &str = "camera_model,sensor_width_mm,sensor_height_mm";

const BUNDLED_SENSORS: &str = include_str!("../data/sensors.csv");

/// Case-folds and collapses internal whitespace.
pub fn normalize_model(model: &str) -> String {
    model
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl SensorTable {
    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_SENSORS).expect("bundled sensor table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, MetadataError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetadataError::SensorTable {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, MetadataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| MetadataError::SensorTable {
                line: 1,
                reason: e.to_string(),
            })?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != SENSOR_TABLE_HEADER {
            return Err(MetadataError::SensorTable {
                line: 1,
                reason: format!("header must be `{SENSOR_TABLE_HEADER}`"),
            });
        }
        let mut rows = HashMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| MetadataError::SensorTable {
                line: e.position().map_or(0, |p| p.line() as usize),
                reason: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: String| MetadataError::SensorTable { line, reason };
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", rec.len())));
            }
            let dim = |i: usize| -> Result<f64, MetadataError> {
                let v: f64 = rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad number {:?}", &rec[i])))?;
                if v > 0.0 && v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(format!("dimension must be positive, got {v}")))
                }
            };
            let spec = SensorSpec {
                camera_model: rec[0].trim().to_string(),
                sensor_width_mm: dim(1)?,
                sensor_height_mm: dim(2)?,
            };
            let key = normalize_model(&spec.camera_model);
            if rows.insert(key, spec).is_some() {
                return Err(bad(format!("duplicate camera model {:?}", &rec[0])));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn lookup(&self, camera_model: &str) -> Result<&SensorSpec, MetadataError> {
        self.rows
            .get(&normalize_model(camera_model))
            .ok_or_else(|| MetadataError::UnknownCamera(camera_model.to_string()))
    }
}

pub fn lookup_sensor<'t>(
    camera_model: &str,
    table: &'t SensorTable,
) -> Result<&'t SensorSpec, MetadataError> {
    table.lookup(camera_model)
}
