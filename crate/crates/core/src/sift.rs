//! Keypoint matching over a large mosaic.
//!
//! A from-scratch SIFT (difference-of-Gaussians detector, 128-d gradient
//! descriptor), ratio-test matching with greedy one-to-one filtering, and a
//! sliding-window search that skips mostly-water windows and keeps the two
//! best-scoring windows.

use std::f32::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{AoiGeometry, CameraOptics, GeoError, GeoPoint, PixelPoint};
use crate::raster::{RasterError, RasterImage};
use crate::result::{MatchResult, Pipeline};

pub const DESCRIPTOR_LEN: usize = 128;
pub const MIN_IMAGE_DIM: u32 = 32;
pub const DEFAULT_WATER_THRESHOLD: f64 = 0.85;
pub const DEFAULT_RATIO: f32 = 0.75;

const IMG_BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE_FACTOR: f32 = 3.0;
const DESC_MAG_CLIP: f32 = 0.2;

#[derive(Debug, Error)]
pub enum SiftError {
    #[error("image {width}x{height} below the {min} px minimum dimension")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("window {window} px larger than AOI {width}x{height}")]
    WindowLargerThanAoi {
        window: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("every window is precluded as water")]
    NoLandWindows,
    #[error("query image produced no keypoints")]
    NoQueryKeypoints,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl SiftError {
    pub fn kind(&self) -> &'static str {
        match self {
            SiftError::ImageTooSmall { .. } => "ImageTooSmall",
            SiftError::WindowLargerThanAoi { .. } => "WindowLargerThanAoi",
            SiftError::InvalidParameter(_) => "InvalidParameter",
            SiftError::NoLandWindows => "NoLandWindows",
            SiftError::NoQueryKeypoints => "NoQueryKeypoints",
            SiftError::Geo(e) => e.kind(),
            SiftError::Raster(_) => "RasterError",
        }
    }
}

/// Detector and descriptor settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftParams {
    /// Blur of the first scale of every octave.
    pub sigma: f32,
    pub scales_per_octave: usize,
    /// Minimum |DoG| at the refined extremum, divided by
    /// `scales_per_octave`, for pixel values in [0, 1].
    pub contrast_threshold: f32,
    /// Maximum ratio of principal curvatures.
    pub edge_ratio: f32,
    /// Blur assumed already present in the input.
    pub assumed_blur: f32,
    /// Octaves are added while the smaller side is at least this long.
    pub min_octave_dim: usize,
    /// Strongest keypoints kept per image.
    pub max_keypoints: usize,
    /// Upsample the input ×2 before building the pyramid.
    pub double_image: bool,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            sigma: 1.6,
            scales_per_octave: 3,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            assumed_blur: 0.5,
            min_octave_dim: 16,
            max_keypoints: 2000,
            double_image: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftKeypoint {
    pub x: f32,
    pub y: f32,
    /// Blur σ at which the keypoint was found, in input pixels.
    pub scale: f32,
    /// Radians in [0, 2π), measured from +x towards +y (image rows down).
    pub orientation: f32,
    /// |DoG| at the refined extremum.
    pub response: f32,
}

pub type SiftDescriptor = [f32; DESCRIPTOR_LEN];

#[derive(Debug, Clone, Default)]
pub struct SiftFeatures {
    pub keypoints: Vec<SiftKeypoint>,
    pub descriptors: Vec<SiftDescriptor>,
}

impl SiftFeatures {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Hot loops have AVX2 variants with identical arithmetic order.
#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

/// Single-channel `f32` image.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn from_raster(img: &RasterImage) -> Self {
        let data = match img.channels() {
            1 => img.data().iter().map(|&v| f32::from(v) / 255.0).collect(),
            _ => img
                .data()
                .chunks_exact(3)
                .map(|p| {
                    (0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2]))
                        / 255.0
                })
                .collect(),
        };
        Self {
            w: img.width() as usize,
            h: img.height() as usize,
            data,
        }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut out = Plane::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = self.at(2 * x, 2 * y);
            }
        }
        out
    }

    fn upsample(&self) -> Plane {
        let (w, h) = (self.w * 2, self.h * 2);
        let mut out = Plane::zeros(w, h);
        for y in 0..h {
            let sy = (y as f32 * 0.5).min((self.h - 1) as f32);
            let (y0, fy) = (sy.floor() as usize, sy.fract());
            let y1 = (y0 + 1).min(self.h - 1);
            for x in 0..w {
                let sx = (x as f32 * 0.5).min((self.w - 1) as f32);
                let (x0, fx) = (sx.floor() as usize, sx.fract());
                let x1 = (x0 + 1).min(self.w - 1);
                let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
                let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
                out.data[y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
        out
    }

    /// Separable Gaussian blur with replicated borders.
    fn blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: AVX2 support was checked at run time.
            return unsafe { self.blur_avx2(sigma) };
        }
        self.blur_impl(sigma)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn blur_avx2(&self, sigma: f32) -> Plane {
        self.blur_impl(sigma)
    }

    #[inline(always)]
    fn blur_impl(&self, sigma: f32) -> Plane {
        let r = ((3.0 * sigma).ceil() as usize).max(1);
        let mut k: Vec<f32> = (0..=2 * r)
            .map(|i| {
                let d = i as f32 - r as f32;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f32 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= sum);

        let (w, h) = (self.w, self.h);
        let mut tmp = Plane::zeros(w, h);
        let mut pad = vec![0.0f32; w + 2 * r];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            pad[..r].fill(row[0]);
            pad[r..r + w].copy_from_slice(row);
            pad[r + w..].fill(row[w - 1]);
            let out = &mut tmp.data[y * w..(y + 1) * w];
            for (j, &kj) in k.iter().enumerate() {
                for (o, &p) in out.iter_mut().zip(&pad[j..j + w]) {
                    *o += kj * p;
                }
            }
        }
        let mut out = Plane::zeros(w, h);
        for y in 0..h {
            let dst = &mut out.data[y * w..(y + 1) * w];
            for (j, &kj) in k.iter().enumerate() {
                let sy = (y + j).saturating_sub(r).min(h - 1);
                let src = &tmp.data[sy * w..(sy + 1) * w];
                for (o, &p) in dst.iter_mut().zip(src) {
                    *o += kj * p;
                }
            }
        }
        out
    }

    fn sub(&self, other: &Plane) -> Plane {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Plane {
            w: self.w,
            h: self.h,
            data,
        }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

/// Gradient magnitude and direction of one Gaussian layer.
struct GradientMap {
    w: usize,
    h: usize,
    mag: Vec<f32>,
    angle: Vec<f32>,
}

impl GradientMap {
    /// Central differences; the one-pixel frame is left at zero and never read.
    fn new(img: &Plane) -> Self {
        let (w, h) = (img.w, img.h);
        let mut mag = vec![0.0; w * h];
        let mut angle = vec![0.0; w * h];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let i = y * w + x;
                let gx = img.data[i + 1] - img.data[i - 1];
                let gy = img.data[i + w] - img.data[i - w];
                mag[i] = (gx * gx + gy * gy).sqrt();
                angle[i] = fast_atan2(gy, gx);
            }
        }
        Self { w, h, mag, angle }
    }
}

/// atan2 with absolute error below 1e-5 rad.
#[inline]
fn fast_atan2(y: f32, x: f32) -> f32 {
    let (ax, ay) = (x.abs(), y.abs());
    if ax == 0.0 && ay == 0.0 {
        return 0.0;
    }
    let (num, den, swap) = if ay > ax {
        (ax, ay, true)
    } else {
        (ay, ax, false)
    };
    let t = num / den;
    let t2 = t * t;
    let mut a = t
        * (0.999_866_0
            + t2 * (-0.330_299_5 + t2 * (0.180_141_0 + t2 * (-0.085_133_0 + t2 * 0.020_835_1))));
    if swap {
        a = std::f32::consts::FRAC_PI_2 - a;
    }
    if x < 0.0 {
        a = PI - a;
    }
    if y < 0.0 {
        -a
    } else {
        a
    }
}

fn build_pyramid(base: &Plane, p: &SiftParams) -> Vec<Octave> {
    let s = p.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    let increments: Vec<f32> = (1..s + 3)
        .map(|i| {
            let prev = p.sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut octaves: Vec<Octave> = Vec::new();
    let mut first = base.clone();
    while first.w.min(first.h) >= p.min_octave_dim.max(2 * IMG_BORDER + 3) {
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(first);
        for inc in &increments {
            let next = gauss.last().expect("non-empty").blur(*inc);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|g| g[1].sub(&g[0])).collect();
        first = gauss[s].downsample();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

/// Candidate after sub-pixel refinement, in octave coordinates.
struct Extremum {
    octave: usize,
    layer: usize,
    x: f32,
    y: f32,
    /// Integer pixel after refinement.
    ix: usize,
    iy: usize,
    /// Octave-relative σ.
    scale_oct: f32,
    response: f32,
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize, v: f32) -> bool {
    let w = dog[layer].w;
    let idx = y * w + x;
    let offsets = [
        idx - w - 1,
        idx - w,
        idx - w + 1,
        idx - 1,
        idx,
        idx + 1,
        idx + w - 1,
        idx + w,
        idx + w + 1,
    ];
    if v > 0.0 {
        for l in layer - 1..=layer + 1 {
            let d = &dog[l].data;
            for &o in &offsets {
                if d[o] > v {
                    return false;
                }
            }
        }
    } else {
        for l in layer - 1..=layer + 1 {
            let d = &dog[l].data;
            for &o in &offsets {
                if d[o] < v {
                    return false;
                }
            }
        }
    }
    true
}

fn solve3(h: [[f32; 3]; 3], b: [f32; 3]) -> Option<[f32; 3]> {
    let det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
        - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
        + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let col = |c: usize| {
        let mut m = h;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    Some([col(0) * inv_det, col(1) * inv_det, col(2) * inv_det])
}

fn refine(
    oct: &Octave,
    o: usize,
    layer0: usize,
    x0: usize,
    y0: usize,
    p: &SiftParams,
) -> Option<Extremum> {
    let s = p.scales_per_octave;
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let (mut layer, mut x, mut y) = (layer0, x0, y0);
    let mut offset = [0.0f32; 3];
    let mut converged = false;
    for _ in 0..MAX_INTERP_STEPS {
        let (prev, cur, next) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
        let v = cur.at(x, y);
        let dx = (cur.at(x + 1, y) - cur.at(x - 1, y)) * 0.5;
        let dy = (cur.at(x, y + 1) - cur.at(x, y - 1)) * 0.5;
        let ds = (next.at(x, y) - prev.at(x, y)) * 0.5;
        let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - 2.0 * v;
        let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - 2.0 * v;
        let dss = next.at(x, y) + prev.at(x, y) - 2.0 * v;
        let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1)
            + cur.at(x - 1, y - 1))
            * 0.25;
        let dxs =
            (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) + prev.at(x - 1, y)) * 0.25;
        let dys =
            (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) + prev.at(x, y - 1)) * 0.25;
        let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        let sol = solve3(hess, [-dx, -dy, -ds])?;
        offset = sol;
        if sol.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if sol.iter().any(|v| v.abs() > 1e6) {
            return None;
        }
        let nx = x as i64 + sol[0].round() as i64;
        let ny = y as i64 + sol[1].round() as i64;
        let nl = layer as i64 + sol[2].round() as i64;
        let b = IMG_BORDER as i64;
        if nl < 1 || nl > s as i64 || nx < b || nx >= w as i64 - b || ny < b || ny >= h as i64 - b {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }

    let (prev, cur, next) = (&oct.dog[layer - 1], &oct.dog[layer], &oct.dog[layer + 1]);
    let v = cur.at(x, y);
    let dx = (cur.at(x + 1, y) - cur.at(x - 1, y)) * 0.5;
    let dy = (cur.at(x, y + 1) - cur.at(x, y - 1)) * 0.5;
    let ds = (next.at(x, y) - prev.at(x, y)) * 0.5;
    let contrast = v + 0.5 * (dx * offset[0] + dy * offset[1] + ds * offset[2]);
    if contrast.abs() * (s as f32) < p.contrast_threshold {
        return None;
    }
    let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - 2.0 * v;
    let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - 2.0 * v;
    let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1)
        + cur.at(x - 1, y - 1))
        * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = p.edge_ratio;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }
    Some(Extremum {
        octave: o,
        layer,
        x: x as f32 + offset[0],
        y: y as f32 + offset[1],
        ix: x,
        iy: y,
        scale_oct: p.sigma * 2f32.powf((layer as f32 + offset[2]) / s as f32),
        response: contrast.abs(),
    })
}

fn orientations(g: &GradientMap, e: &Extremum) -> Vec<f32> {
    let sigma = ORI_SIGMA_FACTOR * e.scale_oct;
    let radius = (3.0 * sigma).round() as i64;
    let weight_scale = -1.0 / (2.0 * sigma * sigma);
    let weights: Vec<f32> = (-radius..=radius)
        .map(|d| ((d * d) as f32 * weight_scale).exp())
        .collect();
    let mut raw = [0.0f32; ORI_BINS];
    let (cx, cy) = (e.ix as i64, e.iy as i64);
    let bins_per_rad = ORI_BINS as f32 / (2.0 * PI);
    for i in -radius..=radius {
        let y = cy + i;
        if y <= 0 || y >= g.h as i64 - 1 {
            continue;
        }
        let wy = weights[(i + radius) as usize];
        for j in -radius..=radius {
            let x = cx + j;
            if x <= 0 || x >= g.w as i64 - 1 {
                continue;
            }
            let idx = y as usize * g.w + x as usize;
            let w = wy * weights[(j + radius) as usize];
            let bin = ((g.angle[idx] * bins_per_rad).round() as i64).rem_euclid(ORI_BINS as i64);
            raw[bin as usize] += w * g.mag[idx];
        }
    }
    let n = ORI_BINS;
    let mut hist = [0.0f32; ORI_BINS];
    for i in 0..n {
        hist[i] = (raw[(i + n - 2) % n] + raw[(i + 2) % n]) * (1.0 / 16.0)
            + (raw[(i + n - 1) % n] + raw[(i + 1) % n]) * (4.0 / 16.0)
            + raw[i] * (6.0 / 16.0);
    }
    let max = hist.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let (l, c, r) = (hist[(i + n - 1) % n], hist[i], hist[(i + 1) % n]);
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let bin = i as f32 + 0.5 * (l - r) / (l - 2.0 * c + r);
            let angle = (bin * 2.0 * PI / n as f32).rem_euclid(2.0 * PI);
            out.push(if angle >= 2.0 * PI { 0.0 } else { angle });
        }
    }
    out
}

fn describe(g: &GradientMap, e: &Extremum, orientation: f32) -> SiftDescriptor {
    let d = DESC_WIDTH;
    let n = DESC_BINS;
    let hist_width = DESC_SCALE_FACTOR * e.scale_oct;
    let max_radius = ((g.w * g.w + g.h * g.h) as f32).sqrt();
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5)
        .round()
        .min(max_radius) as i64;
    let (cos_t, sin_t) = (
        orientation.cos() / hist_width,
        orientation.sin() / hist_width,
    );
    let bins_per_rad = n as f32 / (2.0 * PI);
    // The Gaussian weight depends only on the distance, so it factorizes.
    let exp_scale = -1.0 / (d as f32 * d as f32 * 0.5) / (hist_width * hist_width);
    let weights: Vec<f32> = (-radius..=radius)
        .map(|k| ((k * k) as f32 * exp_scale).exp())
        .collect();
    let mut hist = [0.0f32; (DESC_WIDTH + 2) * (DESC_WIDTH + 2) * (DESC_BINS + 2)];
    let (cx, cy) = (e.ix as i64, e.iy as i64);
    let half = d as f32 / 2.0 - 0.5;
    let (rs, cs) = ((d + 2) * (n + 2), n + 2);

    let df = d as f32;
    'rows: for i in -radius..=radius {
        let y = cy + i;
        if y <= 0 || y >= g.h as i64 - 1 {
            continue;
        }
        let wy = weights[(i + radius) as usize];
        // Columns whose rotated position can land inside the histogram.
        let (mut lo, mut hi) = (-radius.min(cx - 1), radius.min(g.w as i64 - 2 - cx));
        for (slope, offset) in [
            (-sin_t, i as f32 * cos_t + half),
            (cos_t, i as f32 * sin_t + half),
        ] {
            if slope.abs() < 1e-12 {
                if offset <= -1.0 || offset >= df {
                    continue 'rows;
                }
                continue;
            }
            let (a, b) = ((-1.0 - offset) / slope, (df - offset) / slope);
            lo = lo.max(a.min(b).floor() as i64);
            hi = hi.min(a.max(b).ceil() as i64);
        }
        for j in lo..=hi {
            let x = cx + j;
            // Offset expressed in the keypoint's rotated frame, in bin units.
            let rbin = -(j as f32) * sin_t + i as f32 * cos_t + half;
            let cbin = j as f32 * cos_t + i as f32 * sin_t + half;
            if rbin <= -1.0 || rbin >= df || cbin <= -1.0 || cbin >= df {
                continue;
            }
            let idx = y as usize * g.w + x as usize;
            let v = g.mag[idx] * wy * weights[(j + radius) as usize];
            let mut obin = (g.angle[idx] - orientation) * bins_per_rad;
            while obin < 0.0 {
                obin += n as f32;
            }
            if obin >= n as f32 {
                obin = 0.0;
            }

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            // Histogram is padded by one bin on every side; padding is
            // folded back (orientation) or dropped (space) afterwards.
            let base = (r0 as i64 + 1) as usize * rs + (c0 as i64 + 1) as usize * cs + o0 as usize;
            let v1 = v * fr;
            let v0 = v - v1;
            let v11 = v1 * fc;
            let v10 = v1 - v11;
            let v01 = v0 * fc;
            let v00 = v0 - v01;
            for (off, vv) in [(0, v00), (cs, v01), (rs, v10), (rs + cs, v11)] {
                let hi = vv * fo;
                hist[base + off] += vv - hi;
                hist[base + off + 1] += hi;
            }
        }
    }

    let mut out = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..d {
        for c in 0..d {
            let b = (r + 1) * rs + (c + 1) * cs;
            hist[b] += hist[b + n];
            hist[b + 1] += hist[b + n + 1];
            for o in 0..n {
                out[(r * d + c) * n + o] = hist[b + o];
            }
        }
    }
    normalize(&mut out);
    for v in out.iter_mut() {
        *v = v.min(DESC_MAG_CLIP);
    }
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Keypoints and descriptors of an image.
pub fn detect_and_describe(
    img: &RasterImage,
    params: &SiftParams,
) -> Result<SiftFeatures, SiftError> {
    if img.width() < MIN_IMAGE_DIM || img.height() < MIN_IMAGE_DIM {
        return Err(SiftError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min: MIN_IMAGE_DIM,
        });
    }
    if params.scales_per_octave == 0 || !(params.sigma > 0.0) || !(params.edge_ratio > 0.0) {
        return Err(SiftError::InvalidParameter(
            "sigma, edge ratio and scales must be positive".into(),
        ));
    }
    Ok(detect_plane(Plane::from_raster(img), params))
}

fn detect_plane(input: Plane, p: &SiftParams) -> SiftFeatures {
    let (input, in_blur, coord_scale) = if p.double_image {
        (input.upsample(), 2.0 * p.assumed_blur, 0.5f32)
    } else {
        (input, p.assumed_blur, 1.0f32)
    };
    let init = (p.sigma * p.sigma - in_blur * in_blur).max(0.01).sqrt();
    let base = input.blur(init);
    let octaves = build_pyramid(&base, p);
    let s = p.scales_per_octave;
    let prefilter = 0.5 * p.contrast_threshold / s as f32;

    let mut found: Vec<Extremum> = Vec::new();
    for (o, oct) in octaves.iter().enumerate() {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        for layer in 1..=s {
            let cur = &oct.dog[layer];
            for y in IMG_BORDER..h - IMG_BORDER {
                for x in IMG_BORDER..w - IMG_BORDER {
                    let v = cur.data[y * w + x];
                    if v.abs() <= prefilter || !is_extremum(&oct.dog, layer, x, y, v) {
                        continue;
                    }
                    if let Some(e) = refine(oct, o, layer, x, y, p) {
                        found.push(e);
                    }
                }
            }
        }
    }

    // Strongest first; position breaks ties so the order is reproducible.
    found.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.octave.cmp(&b.octave))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });

    let mut grads: Vec<Vec<Option<GradientMap>>> = octaves
        .iter()
        .map(|o| (0..o.gauss.len()).map(|_| None).collect())
        .collect();
    let mut out = SiftFeatures::default();
    for e in &found {
        if out.len() >= p.max_keypoints {
            break;
        }
        let img = grads[e.octave][e.layer]
            .get_or_insert_with(|| GradientMap::new(&octaves[e.octave].gauss[e.layer]));
        let factor = 2f32.powi(e.octave as i32) * coord_scale;
        for angle in orientations(img, e) {
            if out.len() >= p.max_keypoints {
                break;
            }
            out.keypoints.push(SiftKeypoint {
                x: e.x * factor,
                y: e.y * factor,
                scale: e.scale_oct * factor,
                orientation: angle,
                response: e.response,
            });
            out.descriptors.push(describe(img, e, angle));
        }
    }
    out
}

/// Index pair `(query, reference)` with its descriptor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorMatch {
    pub query: usize,
    pub reference: usize,
    pub distance: f32,
}

/// Squared distances from each of four query descriptors to every
/// reference, via `|q|² + |r|² − 2 q·r`; loads of `r` are shared by the
/// four queries.
fn dist2_block(
    q: [&SiftDescriptor; 4],
    qn: [f32; 4],
    r: &[SiftDescriptor],
    rn: &[f32],
    out: &mut [[f32; 4]],
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: AVX2 support was checked at run time.
        return unsafe { dist2_block_avx2(q, qn, r, rn, out) };
    }
    dist2_block_impl(q, qn, r, rn, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dist2_block_avx2(
    q: [&SiftDescriptor; 4],
    qn: [f32; 4],
    r: &[SiftDescriptor],
    rn: &[f32],
    out: &mut [[f32; 4]],
) {
    use std::arch::x86_64::*;
    unsafe fn hsum(v: __m256) -> f32 {
        let lo = _mm256_castps256_ps128(v);
        let hi = _mm256_extractf128_ps(v, 1);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }
    for ((rd, &rnorm), o) in r.iter().zip(rn).zip(out.iter_mut()) {
        let mut acc = [_mm256_setzero_ps(); 4];
        for k in (0..DESCRIPTOR_LEN).step_by(8) {
            let rv = _mm256_loadu_ps(rd.as_ptr().add(k));
            for t in 0..4 {
                let qv = _mm256_loadu_ps(q[t].as_ptr().add(k));
                acc[t] = _mm256_add_ps(acc[t], _mm256_mul_ps(qv, rv));
            }
        }
        for t in 0..4 {
            o[t] = (qn[t] + rnorm - 2.0 * hsum(acc[t])).max(0.0);
        }
    }
}

#[inline(always)]
fn dist2_block_impl(
    q: [&SiftDescriptor; 4],
    qn: [f32; 4],
    r: &[SiftDescriptor],
    rn: &[f32],
    out: &mut [[f32; 4]],
) {
    for ((rd, &rnorm), o) in r.iter().zip(rn).zip(out.iter_mut()) {
        let mut acc = [[0.0f32; 8]; 4];
        for k in (0..DESCRIPTOR_LEN).step_by(8) {
            let rv: &[f32; 8] = rd[k..k + 8].try_into().expect("8 lanes");
            for (a, qd) in acc.iter_mut().zip(&q) {
                let qv: &[f32; 8] = qd[k..k + 8].try_into().expect("8 lanes");
                for l in 0..8 {
                    a[l] += qv[l] * rv[l];
                }
            }
        }
        for t in 0..4 {
            // Same pairwise order as the AVX horizontal sum.
            let a = &acc[t];
            let s: [f32; 4] = std::array::from_fn(|l| a[l] + a[l + 4]);
            let dot = (s[0] + s[2]) + (s[1] + s[3]);
            o[t] = (qn[t] + rnorm - 2.0 * dot).max(0.0);
        }
    }
}

fn sq_norm(d: &SiftDescriptor) -> f32 {
    d.iter().map(|v| v * v).sum()
}

/// Ratio-test matches (`d1 < ratio · d2`), then greedy one-to-one filtering
/// so no reference descriptor is claimed twice (closest claim wins).
pub fn match_descriptors(
    q: &[SiftDescriptor],
    r: &[SiftDescriptor],
    ratio: f32,
) -> Vec<DescriptorMatch> {
    if q.is_empty() || r.is_empty() {
        return Vec::new();
    }
    let ratio2 = ratio * ratio;
    let rn: Vec<f32> = r.iter().map(sq_norm).collect();
    let mut dists = vec![[0.0f32; 4]; r.len()];
    let mut candidates = Vec::new();
    for start in (0..q.len()).step_by(4) {
        let idx = [
            start,
            (start + 1).min(q.len() - 1),
            (start + 2).min(q.len() - 1),
            (start + 3).min(q.len() - 1),
        ];
        let qs = idx.map(|i| &q[i]);
        let qn = idx.map(|i| sq_norm(&q[i]));
        dist2_block(qs, qn, r, &rn, &mut dists);
        for t in 0..4.min(q.len() - start) {
            let (mut best, mut second, mut best_idx) = (f32::INFINITY, f32::INFINITY, 0);
            for (ri, d) in dists.iter().enumerate() {
                let d = d[t];
                if d < best {
                    second = best;
                    best = d;
                    best_idx = ri;
                } else if d < second {
                    second = d;
                }
            }
            if best < ratio2 * second {
                candidates.push(DescriptorMatch {
                    query: start + t,
                    reference: best_idx,
                    distance: best.sqrt(),
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.query.cmp(&b.query))
    });
    let mut used = vec![false; r.len()];
    let mut out: Vec<DescriptorMatch> = candidates
        .into_iter()
        .filter(|m| !std::mem::replace(&mut used[m.reference], true))
        .collect();
    out.sort_by_key(|m| m.query);
    out
}

/// One square subsample of the AOI.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCandidate {
    /// Row-major position in the window grid.
    pub window_index: usize,
    pub top_left_px: PixelPoint,
    pub size_px: u32,
    /// Good-match count.
    pub score: usize,
    /// Location of the window centre; filled once geometry is applied.
    pub center_geo: Option<GeoPoint>,
}

impl WindowCandidate {
    pub fn center_px(&self) -> PixelPoint {
        let half = f64::from(self.size_px) / 2.0;
        PixelPoint::new(self.top_left_px.x + half, self.top_left_px.y + half)
    }
}

/// Number of window positions along one axis.
pub fn windows_per_axis(dim: u32, window: u32, stride: u32) -> u32 {
    if window > dim || stride == 0 {
        0
    } else {
        (dim - window) / stride + 1
    }
}

/// Lazily enumerated square windows in row-major order.
#[derive(Debug, Clone)]
pub struct WindowIter {
    window: u32,
    stride: u32,
    cols: u32,
    rows: u32,
    next: usize,
}

impl WindowIter {
    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn total(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn get(&self, index: usize) -> Option<WindowCandidate> {
        if index >= self.total() {
            return None;
        }
        let (r, c) = (index / self.cols as usize, index % self.cols as usize);
        Some(WindowCandidate {
            window_index: index,
            top_left_px: PixelPoint::new(
                f64::from(c as u32 * self.stride),
                f64::from(r as u32 * self.stride),
            ),
            size_px: self.window,
            score: 0,
            center_geo: None,
        })
    }
}

impl Iterator for WindowIter {
    type Item = WindowCandidate;

    fn next(&mut self) -> Option<Self::Item> {
        let w = self.get(self.next)?;
        self.next += 1;
        Some(w)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total() - self.next.min(self.total());
        (left, Some(left))
    }
}

impl ExactSizeIterator for WindowIter {}

pub fn subsample_windows(
    aoi: &RasterImage,
    window_px: u32,
    stride_px: u32,
) -> Result<WindowIter, SiftError> {
    subsample_dims(aoi.width(), aoi.height(), window_px, stride_px)
}

fn subsample_dims(
    width: u32,
    height: u32,
    window_px: u32,
    stride_px: u32,
) -> Result<WindowIter, SiftError> {
    if stride_px == 0 || window_px == 0 {
        return Err(SiftError::InvalidParameter(
            "window and stride must be at least 1".into(),
        ));
    }
    if window_px > width || window_px > height {
        return Err(SiftError::WindowLargerThanAoi {
            window: window_px,
            width,
            height,
        });
    }
    Ok(WindowIter {
        window: window_px,
        stride: stride_px,
        cols: windows_per_axis(width, window_px, stride_px),
        rows: windows_per_axis(height, window_px, stride_px),
        next: 0,
    })
}

/// Window side matching the camera footprint at the AOI's scale, or a tenth
/// of the AOI's shorter side without optics. Never larger than the AOI.
pub fn window_size_for(
    geom: &AoiGeometry,
    optics: Option<&CameraOptics>,
) -> Result<u32, SiftError> {
    let limit = geom.width_px.min(geom.height_px).floor().max(1.0);
    let side = match optics {
        Some(o) => {
            let area = crate::geo::footprint_area_km2(o)?;
            area.sqrt() / geom.km_per_px()
        }
        None => limit / 10.0,
    };
    Ok(side.round().clamp(1.0, limit) as u32)
}

fn is_water(p: &[u8]) -> bool {
    p[2] > p[0] && p[2] > p[1] && p[2] > 60
}

/// Share of pixels whose blue channel dominates and exceeds 60.
pub fn water_fraction(img: &RasterImage) -> f64 {
    if img.is_empty() || img.channels() != 3 {
        return 0.0;
    }
    let water = img.data().chunks_exact(3).filter(|p| is_water(p)).count();
    water as f64 / (img.width() as f64 * img.height() as f64)
}

fn window_water_fraction(aoi: &RasterImage, x0: u32, y0: u32, size: u32) -> f64 {
    if aoi.channels() != 3 {
        return 0.0;
    }
    let stride = aoi.width() as usize * 3;
    let mut water = 0usize;
    for y in y0..y0 + size {
        let start = y as usize * stride + x0 as usize * 3;
        water += aoi.data()[start..start + size as usize * 3]
            .chunks_exact(3)
            .filter(|p| is_water(p))
            .count();
    }
    water as f64 / (f64::from(size) * f64::from(size))
}

/// Sliding-window search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftMatchOptions {
    pub sift: SiftParams,
    pub ratio: f32,
    /// Windows at or above this water fraction are skipped.
    pub water_threshold: f64,
    /// `None`: derived from the AOI (a tenth of the shorter side).
    pub window_px: Option<u32>,
    /// `None`: half the window.
    pub stride_px: Option<u32>,
    pub jobs: usize,
}

impl Default for SiftMatchOptions {
    fn default() -> Self {
        Self {
            sift: SiftParams::default(),
            ratio: DEFAULT_RATIO,
            water_threshold: DEFAULT_WATER_THRESHOLD,
            window_px: None,
            stride_px: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SiftStats {
    pub total_windows: usize,
    pub processed_windows: usize,
    pub precluded_windows: usize,
    pub query_keypoints: usize,
}

#[derive(Debug, Clone)]
pub struct SiftOutcome {
    /// Rank 1 and (when available) rank 2.
    pub results: Vec<MatchResult>,
    pub candidates: Vec<WindowCandidate>,
    pub stats: SiftStats,
}

pub type ProgressFn<'a> = &'a (dyn Fn(usize, usize) + Sync);

pub fn sift_geolocate(
    query: &RasterImage,
    aoi: &RasterImage,
    geom: &AoiGeometry,
    opts: &SiftMatchOptions,
    progress: Option<ProgressFn<'_>>,
) -> Result<SiftOutcome, SiftError> {
    let start = std::time::Instant::now();
    let window = match opts.window_px {
        Some(w) => w,
        None => window_size_for(geom, None)?,
    };
    let stride = opts.stride_px.unwrap_or((window / 2).max(1));
    let windows = subsample_windows(aoi, window, stride)?;
    let qf = detect_and_describe(query, &opts.sift)?;
    if qf.is_empty() {
        return Err(SiftError::NoQueryKeypoints);
    }
    let total = windows.total();
    let done = AtomicUsize::new(0);

    let score_window = |index: usize| -> Result<Option<usize>, SiftError> {
        let w = windows.get(index).expect("index below total");
        let (x0, y0) = (w.top_left_px.x as u32, w.top_left_px.y as u32);
        let result = if window_water_fraction(aoi, x0, y0, window) >= opts.water_threshold {
            None
        } else {
            let crop = aoi.crop(x0, y0, window, window)?;
            let wf = if window < MIN_IMAGE_DIM {
                SiftFeatures::default()
            } else {
                detect_and_describe(&crop, &opts.sift)?
            };
            Some(match_descriptors(&qf.descriptors, &wf.descriptors, opts.ratio).len())
        };
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(p) = progress {
            p(n, total);
        }
        Ok(result)
    };

    let scores: Vec<Option<usize>> = if opts.jobs <= 1 {
        (0..total).map(score_window).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| SiftError::InvalidParameter(e.to_string()))?;
        pool.install(|| {
            (0..total)
                .into_par_iter()
                .map(score_window)
                .collect::<Result<_, _>>()
        })?
    };

    let mut candidates: Vec<WindowCandidate> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            s.map(|score| {
                let mut c = windows.get(i).expect("index below total");
                c.score = score;
                c
            })
        })
        .collect();
    let stats = SiftStats {
        total_windows: total,
        processed_windows: candidates.len(),
        precluded_windows: total - candidates.len(),
        query_keypoints: qf.len(),
    };
    if candidates.is_empty() {
        return Err(SiftError::NoLandWindows);
    }
    candidates.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then(a.window_index.cmp(&b.window_index))
    });
    for c in candidates.iter_mut() {
        c.center_geo = Some(geom.local_to_geo(c.center_px())?);
    }
    let runtime = start.elapsed().as_secs_f64();
    let results = candidates
        .iter()
        .take(2)
        .enumerate()
        .map(|(i, c)| {
            let mut r = MatchResult::new("", Pipeline::Sift, i as u8 + 1);
            r.predicted = c.center_geo;
            r.score = c.score as f64;
            r.runtime_s = runtime;
            r
        })
        .collect();
    Ok(SiftOutcome {
        results,
        candidates,
        stats,
    })
}
