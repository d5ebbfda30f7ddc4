//! Feature-map geolocation: images become feature maps through a pluggable
//! extractor, the query is located inside the AOI by zero-mean
//! cross-correlation, and the peak is projected back to coordinates.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::geo::{AoiGeometry, GeoError, PixelPoint};
use crate::raster::RasterImage;
use crate::result::{MatchResult, Pipeline};

pub const FMAP_MAGIC: &[u8; 5] = b"FMAP1";
pub const DEFAULT_POOL: u32 = 8;
pub const DEFAULT_LOW_CONFIDENCE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bad extractor spec: {0}")]
    BadExtractorSpec(String),
    #[error("FMAP format error: {0}")]
    FmapFormatError(String),
    #[error("query {q_height}x{q_width} larger than reference {a_height}x{a_width}")]
    QueryLargerThanReference {
        q_height: usize,
        q_width: usize,
        a_height: usize,
        a_width: usize,
    },
    #[error("query has zero variance; normalized correlation undefined")]
    ZeroVarianceQuery,
    #[error("channel count differs: query {query}, reference {reference}")]
    ChannelMismatch { query: usize, reference: usize },
    #[error("stride differs: query {query}, reference {reference}")]
    StrideMismatch { query: u32, reference: u32 },
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FeatureError {
    pub fn kind(&self) -> &'static str {
        match self {
            FeatureError::BadExtractorSpec(_) => "BadExtractorSpec",
            FeatureError::FmapFormatError(_) => "FmapFormatError",
            FeatureError::QueryLargerThanReference { .. } => "QueryLargerThanReference",
            FeatureError::ZeroVarianceQuery => "ZeroVarianceQuery",
            FeatureError::ChannelMismatch { .. } => "ChannelMismatch",
            FeatureError::StrideMismatch { .. } => "StrideMismatch",
            FeatureError::InvalidFeatureMap(_) => "InvalidFeatureMap",
            FeatureError::Geo(e) => e.kind(),
            FeatureError::Io(_) => "IoError",
        }
    }
}

/// Multi-channel grid of features; channel-major, row-major within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    /// AOI pixels per feature cell.
    stride: u32,
    /// AOI pixel position of cell (0, 0).
    origin: (u32, u32),
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: u32,
        origin: (u32, u32),
        values: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if stride < 1 {
            return Err(FeatureError::InvalidFeatureMap(
                "stride must be at least 1".into(),
            ));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(FeatureError::InvalidFeatureMap("empty dimensions".into()));
        }
        if values.len() != channels * height * width {
            return Err(FeatureError::InvalidFeatureMap(format!(
                "{} values for {channels}x{height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidFeatureMap("non-finite value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            origin,
            values,
        })
    }

    /// Single-channel map from a row-major `f64` grid (stride 1, origin 0).
    pub fn from_grid(height: usize, width: usize, values: &[f64]) -> Result<Self, FeatureError> {
        Self::new(
            1,
            height,
            width,
            1,
            (0, 0),
            values.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn origin(&self) -> (u32, u32) {
        self.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Sub-map of `h × w` cells starting at cell `(y, x)`; origin follows.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self, FeatureError> {
        if y + h > self.height || x + w > self.width {
            return Err(FeatureError::InvalidFeatureMap("crop outside map".into()));
        }
        let mut values = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for row in y..y + h {
                values.extend_from_slice(&plane[row * self.width + x..row * self.width + x + w]);
            }
        }
        let origin = (
            self.origin.0 + x as u32 * self.stride,
            self.origin.1 + y as u32 * self.stride,
        );
        Self::new(self.channels, h, w, self.stride, origin, values)
    }

    pub fn write_fmap(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(FMAP_MAGIC)?;
        for v in [
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.stride,
            self.origin.0,
            self.origin.1,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn to_fmap_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.values.len() * 4);
        self.write_fmap(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        Ok(atomic_write(path, &self.to_fmap_bytes())?)
    }

    pub fn read_fmap(input: &mut impl Read) -> Result<Self, FeatureError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_fmap_bytes(&bytes)
    }

    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let bad = |m: &str| FeatureError::FmapFormatError(m.to_string());
        if bytes.len() < 29 || &bytes[..5] != FMAP_MAGIC {
            return Err(bad("missing FMAP1 header"));
        }
        let word = |i: usize| {
            let s = 5 + 4 * i;
            u32::from_le_bytes(bytes[s..s + 4].try_into().expect("4 bytes"))
        };
        let (channels, height, width) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let (stride, ox, oy) = (word(3), word(4), word(5));
        let count = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| bad("dimensions overflow"))?;
        let payload = &bytes[29..];
        if payload.len() != count * 4 {
            return Err(FeatureError::FmapFormatError(format!(
                "expected {} payload bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(channels, height, width, stride, (ox, oy), values)
            .map_err(|e| FeatureError::FmapFormatError(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        Self::from_fmap_bytes(&std::fs::read(path)?)
    }
}

/// How an image becomes a feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorSpec {
    /// Luminance, one cell per pixel.
    IdentityGray,
    /// Luminance averaged over `pool × pool` blocks.
    MeanPool { pool: u32 },
    /// Precomputed FMAP file, e.g. from an external CNN.
    ExternalFile { path: PathBuf },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::MeanPool { pool: DEFAULT_POOL }
    }
}

/// `identity`, `mean-pool`, `mean-pool:N` or `file:PATH`.
impl std::str::FromStr for ExtractorSpec {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "identity" => Ok(ExtractorSpec::IdentityGray),
            None if s == "mean-pool" => Ok(ExtractorSpec::default()),
            Some(("mean-pool", n)) => match n.parse::<u32>() {
                Ok(pool) if pool > 0 => Ok(ExtractorSpec::MeanPool { pool }),
                _ => Err(FeatureError::BadExtractorSpec(format!(
                    "bad pool size {n:?}"
                ))),
            },
            Some(("file", path)) if !path.is_empty() => {
                Ok(ExtractorSpec::ExternalFile { path: path.into() })
            }
            _ => Err(FeatureError::BadExtractorSpec(format!(
                "unknown extractor {s:?} (expected identity, mean-pool[:N] or file:PATH)"
            ))),
        }
    }
}

pub fn extract_features(
    img: &RasterImage,
    spec: &ExtractorSpec,
) -> Result<FeatureMap, FeatureError> {
    if let ExtractorSpec::ExternalFile { path } = spec {
        return FeatureMap::load(path);
    }
    if img.is_empty() {
        return Err(FeatureError::BadExtractorSpec("empty image".into()));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let lum = img.luminance();
    match spec {
        ExtractorSpec::IdentityGray => {
            FeatureMap::new(1, h, w, 1, (0, 0), lum.iter().map(|&v| v as f32).collect())
        }
        ExtractorSpec::MeanPool { pool } => {
            let p = *pool as usize;
            if p == 0 {
                return Err(FeatureError::BadExtractorSpec(
                    "pool must be at least 1".into(),
                ));
            }
            let (cw, ch) = (w / p, h / p);
            if cw == 0 || ch == 0 {
                return Err(FeatureError::BadExtractorSpec(format!(
                    "pool {p} larger than {w}x{h} image"
                )));
            }
            let mut sums = vec![0.0f64; cw * ch];
            for y in 0..ch * p {
                let row = &lum[y * w..y * w + cw * p];
                let out = &mut sums[(y / p) * cw..(y / p + 1) * cw];
                for (x, v) in row.iter().enumerate() {
                    out[x / p] += v;
                }
            }
            let area = (p * p) as f64;
            let values = sums.into_iter().map(|s| (s / area) as f32).collect();
            FeatureMap::new(1, ch, cw, *pool, (0, 0), values)
        }
        ExtractorSpec::ExternalFile { .. } => unreachable!("handled above"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationMode {
    /// Zero-mean normalized cross-correlation, scores in [−1, 1].
    #[default]
    Normalized,
    /// Zero-mean correlation, reference mean taken per overlapped window.
    Raw,
    /// Zero-mean correlation, reference mean taken over the whole map.
    RawGlobalMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationEngine {
    /// Picks by estimated cost.
    #[default]
    Auto,
    Direct,
    Fft,
}

/// Scores over every valid offset of the query inside the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSurface {
    height: usize,
    width: usize,
    scores: Vec<f64>,
    normalized: bool,
    /// Feature-cell offset of entry (0, 0).
    pub offset_origin: (usize, usize),
}

impl CorrelationSurface {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Score at offset `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    /// Highest score; ties go to the smallest `(y, x)`.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for y in 0..self.height {
            for x in 0..self.width {
                let s = self.at(y, x);
                if s > best.2 {
                    best = (y, x, s);
                }
            }
        }
        best
    }

    /// Best score at least `radius` cells (Chebyshev) away from `(py, px)`.
    pub fn runner_up(&self, py: usize, px: usize, radius: usize) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if y.abs_diff(py) < radius && x.abs_diff(px) < radius {
                    continue;
                }
                let s = self.at(y, x);
                if best.is_none_or(|b| s > b.2) {
                    best = Some((y, x, s));
                }
            }
        }
        best
    }
}

pub fn cross_correlate(
    q: &FeatureMap,
    a: &FeatureMap,
    mode: CorrelationMode,
) -> Result<CorrelationSurface, FeatureError> {
    cross_correlate_with(q, a, mode, CorrelationEngine::Auto)
}

pub fn cross_correlate_with(
    q: &FeatureMap,
    a: &FeatureMap,
    mode: CorrelationMode,
    engine: CorrelationEngine,
) -> Result<CorrelationSurface, FeatureError> {
    if q.channels != a.channels {
        return Err(FeatureError::ChannelMismatch {
            query: q.channels,
            reference: a.channels,
        });
    }
    if q.stride != a.stride {
        return Err(FeatureError::StrideMismatch {
            query: q.stride,
            reference: a.stride,
        });
    }
    if q.height > a.height || q.width > a.width {
        return Err(FeatureError::QueryLargerThanReference {
            q_height: q.height,
            q_width: q.width,
            a_height: a.height,
            a_width: a.width,
        });
    }
    let (oh, ow) = (a.height - q.height + 1, a.width - q.width + 1);
    let n = (q.height * q.width) as f64;

    // Zero-mean query, per channel.
    let mut q0 = Vec::with_capacity(q.values.len());
    let mut q_energy = 0.0;
    for c in 0..q.channels {
        let plane = q.channel(c);
        let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        for &v in plane {
            let d = f64::from(v) - mean;
            q_energy += d * d;
            q0.push(d);
        }
    }
    let normalized = mode == CorrelationMode::Normalized;
    if normalized && q_energy <= 0.0 {
        return Err(FeatureError::ZeroVarianceQuery);
    }

    let use_fft = match engine {
        CorrelationEngine::Direct => false,
        CorrelationEngine::Fft => true,
        CorrelationEngine::Auto => {
            let direct = (oh * ow * q.height * q.width) as f64;
            let (ph, pw) = (fft_len(a.height), fft_len(a.width));
            let fft = 3.0 * (ph * pw) as f64 * ((ph * pw) as f64).log2() + 1e4;
            direct > 4.0 * fft
        }
    };

    let scores = if use_fft {
        correlate_fft(&q0, q, a, mode, q_energy, oh, ow)
    } else {
        correlate_direct(&q0, q, a, mode, q_energy, oh, ow)
    };
    Ok(CorrelationSurface {
        height: oh,
        width: ow,
        scores,
        normalized,
        offset_origin: (0, 0),
    })
}

fn correlate_direct(
    q0: &[f64],
    q: &FeatureMap,
    a: &FeatureMap,
    mode: CorrelationMode,
    q_energy: f64,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (qh, qw) = (q.height, q.width);
    let n = (qh * qw) as f64;
    let global_means: Vec<f64> = (0..a.channels)
        .map(|c| {
            a.channel(c).iter().map(|&v| f64::from(v)).sum::<f64>() / (a.height * a.width) as f64
        })
        .collect();
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut num = 0.0;
            let mut a_energy = 0.0;
            for c in 0..a.channels {
                let plane = a.channel(c);
                let qp = &q0[c * qh * qw..(c + 1) * qh * qw];
                let mean = match mode {
                    CorrelationMode::RawGlobalMean => global_means[c],
                    _ => {
                        let mut s = 0.0;
                        for i in 0..qh {
                            let row = &plane[(oy + i) * a.width + ox..][..qw];
                            s += row.iter().map(|&v| f64::from(v)).sum::<f64>();
                        }
                        s / n
                    }
                };
                for i in 0..qh {
                    let row = &plane[(oy + i) * a.width + ox..][..qw];
                    let qrow = &qp[i * qw..(i + 1) * qw];
                    for (qv, &av) in qrow.iter().zip(row) {
                        let d = f64::from(av) - mean;
                        num += qv * d;
                        a_energy += d * d;
                    }
                }
            }
            out[oy * ow + ox] = match mode {
                CorrelationMode::Normalized => ncc(num, q_energy, a_energy),
                _ => num,
            };
        }
    }
    out
}

fn ncc(num: f64, q_energy: f64, a_energy: f64) -> f64 {
    if a_energy <= 0.0 {
        return 0.0;
    }
    (num / (q_energy.sqrt() * a_energy.sqrt())).clamp(-1.0, 1.0)
}

/// Smallest 2^a·3^b·5^c ≥ n.
fn fft_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

struct Fft2 {
    h: usize,
    w: usize,
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row = planner.plan_fft_forward(w);
        let col = planner.plan_fft_forward(h);
        let row_inv = planner.plan_fft_inverse(w);
        let col_inv = planner.plan_fft_inverse(h);
        Self {
            h,
            w,
            row,
            col,
            row_inv,
            col_inv,
            scratch: vec![Complex::default(); h * w],
        }
    }

    fn run(&mut self, data: &mut [Complex<f64>], inverse: bool) {
        let (row, col) = if inverse {
            (self.row_inv.clone(), self.col_inv.clone())
        } else {
            (self.row.clone(), self.col.clone())
        };
        row.process(data);
        transpose(data, &mut self.scratch, self.h, self.w);
        col.process(&mut self.scratch);
        transpose(&self.scratch, data, self.w, self.h);
    }
}

fn transpose(src: &[Complex<f64>], dst: &mut [Complex<f64>], h: usize, w: usize) {
    const B: usize = 32;
    for by in (0..h).step_by(B) {
        for bx in (0..w).step_by(B) {
            for y in by..(by + B).min(h) {
                for x in bx..(bx + B).min(w) {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
    }
}

/// Summed-area table with a zero top row and left column.
fn integral(plane: &[f32], h: usize, w: usize, square: bool) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            let v = f64::from(plane[y * w + x]);
            run += if square { v * v } else { v };
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + run;
        }
    }
    t
}

fn box_sum(t: &[f64], w: usize, y: usize, x: usize, bh: usize, bw: usize) -> f64 {
    let s = w + 1;
    t[(y + bh) * s + x + bw] - t[y * s + x + bw] - t[(y + bh) * s + x] + t[y * s + x]
}

fn correlate_fft(
    q0: &[f64],
    q: &FeatureMap,
    a: &FeatureMap,
    mode: CorrelationMode,
    q_energy: f64,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (qh, qw) = (q.height, q.width);
    let (ph, pw) = (fft_len(a.height), fft_len(a.width));
    let mut fft = Fft2::new(ph, pw);
    let mut acc = vec![Complex::default(); ph * pw];
    let mut abuf = vec![Complex::default(); ph * pw];
    let mut qbuf = vec![Complex::default(); ph * pw];
    for c in 0..a.channels {
        abuf.iter_mut().for_each(|v| *v = Complex::default());
        qbuf.iter_mut().for_each(|v| *v = Complex::default());
        let plane = a.channel(c);
        for y in 0..a.height {
            for x in 0..a.width {
                abuf[y * pw + x].re = f64::from(plane[y * a.width + x]);
            }
        }
        let qp = &q0[c * qh * qw..(c + 1) * qh * qw];
        for y in 0..qh {
            for x in 0..qw {
                qbuf[y * pw + x].re = qp[y * qw + x];
            }
        }
        fft.run(&mut abuf, false);
        fft.run(&mut qbuf, false);
        for ((s, av), qv) in acc.iter_mut().zip(&abuf).zip(&qbuf) {
            *s += av * qv.conj();
        }
    }
    fft.run(&mut acc, true);
    let scale = 1.0 / (ph * pw) as f64;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = acc[y * pw + x].re * scale;
        }
    }
    if mode != CorrelationMode::Normalized {
        // Σ(Q − Q̄) = 0, so subtracting any reference mean leaves the sum as is.
        return out;
    }
    let n = (qh * qw) as f64;
    let mut a_energy = vec![0.0; oh * ow];
    let mut a_sumsq = vec![0.0; oh * ow];
    for c in 0..a.channels {
        let plane = a.channel(c);
        let s1 = integral(plane, a.height, a.width, false);
        let s2 = integral(plane, a.height, a.width, true);
        for y in 0..oh {
            for x in 0..ow {
                let sum = box_sum(&s1, a.width, y, x, qh, qw);
                let sq = box_sum(&s2, a.width, y, x, qh, qw);
                a_energy[y * ow + x] += sq - sum * sum / n;
                a_sumsq[y * ow + x] += sq;
            }
        }
    }
    for i in 0..out.len() {
        // Below this the window is constant up to summation round-off.
        let e = if a_energy[i] <= 1e-10 * a_sumsq[i] {
            0.0
        } else {
            a_energy[i]
        };
        out[i] = ncc(out[i], q_energy, e);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnOptions {
    pub mode: CorrelationMode,
    pub engine: CorrelationEngine,
    /// Peaks below this are flagged low-confidence.
    pub low_confidence: f64,
}

impl Default for NnOptions {
    fn default() -> Self {
        Self {
            mode: CorrelationMode::Normalized,
            engine: CorrelationEngine::Auto,
            low_confidence: DEFAULT_LOW_CONFIDENCE,
        }
    }
}

/// Best placement of the query inside the AOI.
#[derive(Debug, Clone, PartialEq)]
pub struct NnMatch {
    pub result: MatchResult,
    /// Peak offset in feature cells, `(y, x)`.
    pub offset: (usize, usize),
    /// Centre of the matched window in AOI pixels.
    pub center_px: PixelPoint,
    pub peak_score: f64,
    /// Best score outside the peak's neighbourhood.
    pub runner_up_score: Option<f64>,
    pub low_confidence: bool,
}

pub fn nn_geolocate(
    query: &RasterImage,
    aoi: &RasterImage,
    geom: &AoiGeometry,
    spec: &ExtractorSpec,
    opts: &NnOptions,
) -> Result<NnMatch, FeatureError> {
    let qf = extract_features(query, spec)?;
    let af = extract_features(aoi, spec)?;
    nn_geolocate_features(&qf, &af, geom, opts)
}

/// As [`nn_geolocate`], on precomputed feature maps.
pub fn nn_geolocate_features(
    qf: &FeatureMap,
    af: &FeatureMap,
    geom: &AoiGeometry,
    opts: &NnOptions,
) -> Result<NnMatch, FeatureError> {
    let start = std::time::Instant::now();
    let surface = cross_correlate_with(qf, af, opts.mode, opts.engine)?;
    let (oy, ox, peak) = surface.argmax();
    let radius = (qf.height.min(qf.width) / 2).max(1);
    let runner_up_score = surface.runner_up(oy, ox, radius).map(|r| r.2);
    let stride = f64::from(af.stride);
    let center_px = PixelPoint::new(
        f64::from(af.origin.0) + (ox as f64 + qf.width as f64 / 2.0) * stride,
        f64::from(af.origin.1) + (oy as f64 + qf.height as f64 / 2.0) * stride,
    );
    let predicted = geom.local_to_geo(center_px)?;
    let mut result = MatchResult::new("", Pipeline::Nn, 1);
    result.predicted = Some(predicted);
    result.score = peak;
    result.runtime_s = start.elapsed().as_secs_f64();
    Ok(NnMatch {
        result,
        offset: (oy, ox),
        center_px,
        peak_score: peak,
        runner_up_score,
        low_confidence: opts.mode == CorrelationMode::Normalized && peak < opts.low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_grid(seed: u64, h: usize, w: usize) -> Vec<f64> {
        let mut s = seed;
        (0..h * w)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f64) / f64::from(1u32 << 31)
            })
            .collect()
    }

    #[test]
    fn extractor_spec_strings() {
        assert_eq!(
            "identity".parse::<ExtractorSpec>().unwrap(),
            ExtractorSpec::IdentityGray
        );
        assert_eq!(
            "mean-pool".parse::<ExtractorSpec>().unwrap(),
            ExtractorSpec::MeanPool { pool: 8 }
        );
        assert_eq!(
            "mean-pool:4".parse::<ExtractorSpec>().unwrap(),
            ExtractorSpec::MeanPool { pool: 4 }
        );
        assert!("mean-pool:0".parse::<ExtractorSpec>().is_err());
        assert!("vgg".parse::<ExtractorSpec>().is_err());
        assert_eq!(
            "file:a.fmap".parse::<ExtractorSpec>().unwrap(),
            ExtractorSpec::ExternalFile {
                path: "a.fmap".into()
            }
        );
    }

    #[test]
    fn mean_pool_blocks() {
        let img = RasterImage::from_gray_fn(4, 4, |x, y| (1 + x + 4 * y) as u8);
        let f = extract_features(&img, &ExtractorSpec::MeanPool { pool: 2 }).unwrap();
        assert_eq!((f.height(), f.width(), f.stride()), (2, 2, 2));
        assert_eq!(f.values(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn identity_gray_keeps_pixels() {
        let img = RasterImage::from_gray_fn(5, 3, |x, y| (x * 40 + y) as u8);
        let f = extract_features(&img, &ExtractorSpec::IdentityGray).unwrap();
        let expect: Vec<f32> = img.data().iter().map(|&v| f32::from(v)).collect();
        assert_eq!(f.values(), expect.as_slice());
    }

    #[test]
    fn bad_pool_rejected() {
        let img = RasterImage::from_gray_fn(4, 4, |_, _| 0);
        assert!(matches!(
            extract_features(&img, &ExtractorSpec::MeanPool { pool: 0 }),
            Err(FeatureError::BadExtractorSpec(_))
        ));
        assert!(matches!(
            extract_features(&img, &ExtractorSpec::MeanPool { pool: 5 }),
            Err(FeatureError::BadExtractorSpec(_))
        ));
    }

    #[test]
    fn fmap_round_trip_and_layout() {
        let f = FeatureMap::new(
            2,
            2,
            3,
            4,
            (8, 12),
            (0..12).map(|v| v as f32 * 0.25).collect(),
        )
        .unwrap();
        let bytes = f.to_fmap_bytes();
        assert_eq!(&bytes[..5], b"FMAP1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 29 + 48);
        assert_eq!(FeatureMap::from_fmap_bytes(&bytes).unwrap(), f);
        assert!(FeatureMap::from_fmap_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(FeatureMap::from_fmap_bytes(b"FMAP2").is_err());
    }

    #[test]
    fn constant_query_gives_zero_raw_surface() {
        let a = FeatureMap::from_grid(6, 6, &lcg_grid(1, 6, 6)).unwrap();
        let q = FeatureMap::from_grid(2, 2, &[5.0; 4]).unwrap();
        let s = cross_correlate(&q, &a, CorrelationMode::Raw).unwrap();
        assert!(s.scores().iter().all(|&v| v == 0.0));
        assert!(matches!(
            cross_correlate(&q, &a, CorrelationMode::Normalized),
            Err(FeatureError::ZeroVarianceQuery)
        ));
    }

    #[test]
    fn self_correlation_is_one() {
        let a = FeatureMap::from_grid(7, 5, &lcg_grid(2, 7, 5)).unwrap();
        let s = cross_correlate(&a, &a, CorrelationMode::Normalized).unwrap();
        assert_eq!((s.height(), s.width()), (1, 1));
        assert!((s.at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fft_and_direct_agree() {
        let a = FeatureMap::from_grid(40, 33, &lcg_grid(3, 40, 33)).unwrap();
        let q = a.crop(10, 7, 9, 6).unwrap();
        for mode in [
            CorrelationMode::Normalized,
            CorrelationMode::Raw,
            CorrelationMode::RawGlobalMean,
        ] {
            let d = cross_correlate_with(&q, &a, mode, CorrelationEngine::Direct).unwrap();
            let f = cross_correlate_with(&q, &a, mode, CorrelationEngine::Fft).unwrap();
            for (x, y) in d.scores().iter().zip(f.scores()) {
                assert!((x - y).abs() < 1e-9, "{mode:?}: {x} vs {y}");
            }
            assert_eq!(d.argmax().0, 10);
            assert_eq!(d.argmax().1, 7);
        }
    }

    #[test]
    fn argmax_ties_pick_smallest_offset() {
        let a = FeatureMap::from_grid(1, 6, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let q = FeatureMap::from_grid(1, 2, &[0.0, 1.0]).unwrap();
        let s = cross_correlate(&q, &a, CorrelationMode::Normalized).unwrap();
        assert_eq!(s.argmax().1, 0);
    }

    #[test]
    fn shape_errors() {
        let a = FeatureMap::from_grid(3, 3, &lcg_grid(4, 3, 3)).unwrap();
        let q = FeatureMap::from_grid(4, 2, &lcg_grid(5, 4, 2)).unwrap();
        assert!(matches!(
            cross_correlate(&q, &a, CorrelationMode::Raw),
            Err(FeatureError::QueryLargerThanReference { .. })
        ));
    }

    #[test]
    fn fft_len_is_smooth() {
        assert_eq!(fft_len(1), 1);
        assert_eq!(fft_len(7), 8);
        assert_eq!(fft_len(121), 125);
        assert_eq!(fft_len(1024), 1024);
    }
}
