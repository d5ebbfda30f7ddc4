//! Seeded synthetic imagery shared by the integration suites.
#![allow(dead_code)]

use issgeo::features::FeatureMap;
use issgeo::raster::RasterImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn blur_f32(data: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f32> = (-r..=r)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / s).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Smooth multi-scale noise: a bicubic-upsampled coarse grid plus blurred
/// fine noise, stretched to the full 8-bit range.
pub fn texture(seed: u64, w: u32, h: u32) -> RasterImage {
    texture_scaled(seed, w, h, 8, 1.5)
}

/// As [`texture`], with a coarse grid of one sample per `cell` pixels and
/// fine noise blurred by `fine_sigma`.
pub fn texture_scaled(seed: u64, w: u32, h: u32, cell: u32, fine_sigma: f32) -> RasterImage {
    let mut r = rng(seed);
    let (cw, ch) = ((w / cell).max(2), (h / cell).max(2));
    let coarse: Vec<u8> = (0..cw * ch).map(|_| r.random::<u8>()).collect();
    let coarse = image::GrayImage::from_raw(cw, ch, coarse).unwrap();
    let big = image::imageops::resize(&coarse, w, h, image::imageops::FilterType::CatmullRom);
    let (wu, hu) = (w as usize, h as usize);
    let fine: Vec<f32> = (0..wu * hu).map(|_| r.random::<f32>()).collect();
    let fine = blur_f32(&fine, wu, hu, fine_sigma);
    let mix: Vec<f32> = big
        .as_raw()
        .iter()
        .zip(&fine)
        .map(|(&b, &f)| 0.7 * f32::from(b) / 255.0 + 0.6 * f)
        .collect();
    let lo = mix.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = mix.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let data = mix
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0) as u8)
        .collect();
    RasterImage::new(w, h, 1, data).unwrap()
}

/// Rotation by `deg` degrees about the image centre with bilinear sampling;
/// returns the image and the forward map from source to rotated coordinates.
pub fn rotate(img: &RasterImage, deg: f64) -> (RasterImage, impl Fn(f64, f64) -> (f64, f64)) {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let gray = img.to_gray();
    let out = RasterImage::from_gray_fn(w, h, |x, y| {
        // Inverse map: rotated → source.
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = c * dx - s * dy + cx;
        let sy = s * dx + c * dy + cy;
        if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
            return 0;
        }
        let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let p = |x, y| f64::from(gray.pixel(x, y)[0]);
        let v = (p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx) * (1.0 - fy)
            + (p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx) * fy;
        v.round() as u8
    });
    let forward = move |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    };
    (out, forward)
}

pub fn add_noise(img: &RasterImage, amplitude: f64, seed: u64) -> RasterImage {
    let mut r = rng(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let n = r.random_range(-amplitude..=amplitude);
        *v = (f64::from(*v) + n).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Feature map of uniform values in `[0, 1)`, or of integers below `levels`
/// when given (which makes flat windows likely).
pub fn random_map(
    seed: u64,
    channels: usize,
    h: usize,
    w: usize,
    levels: Option<u32>,
) -> FeatureMap {
    let mut r = rng(seed);
    let values = (0..channels * h * w)
        .map(|_| match levels {
            Some(l) => r.random_range(0..l) as f32,
            None => r.random::<f32>(),
        })
        .collect();
    FeatureMap::new(channels, h, w, 1, (0, 0), values).unwrap()
}

/// Quadruple-loop reference: zero-mean correlation with the window mean
/// taken per channel, optionally normalized by both energies.
pub fn naive_correlation(q: &FeatureMap, a: &FeatureMap, normalized: bool) -> Vec<f64> {
    let (qh, qw) = (q.height(), q.width());
    let (oh, ow) = (a.height() - qh + 1, a.width() - qw + 1);
    let n = (qh * qw) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut num, mut qe, mut ae) = (0.0f64, 0.0f64, 0.0f64);
            for c in 0..q.channels() {
                let mut qm = 0.0;
                let mut am = 0.0;
                for i in 0..qh {
                    for j in 0..qw {
                        qm += f64::from(q.get(c, i, j));
                        am += f64::from(a.get(c, oy + i, ox + j));
                    }
                }
                qm /= n;
                am /= n;
                for i in 0..qh {
                    for j in 0..qw {
                        let dq = f64::from(q.get(c, i, j)) - qm;
                        let da = f64::from(a.get(c, oy + i, ox + j)) - am;
                        num += dq * da;
                        qe += dq * dq;
                        ae += da * da;
                    }
                }
            }
            out.push(if !normalized {
                num
            } else if ae == 0.0 {
                0.0
            } else {
                (num / (qe.sqrt() * ae.sqrt())).clamp(-1.0, 1.0)
            });
        }
    }
    out
}

/// Stitches every grid shape up to `max`×`max` of 8 px tiles, each tile
/// filled with a distinct pattern, and checks every mosaic pixel.
pub fn check_stitching(max: u32) -> Result<usize, String> {
    use issgeo::tiles::{stitch, TileGrid};
    const PX: u32 = 8;
    let mut checked = 0;
    for rows in 1..=max {
        for cols in 1..=max {
            let grid = TileGrid {
                z: 4,
                x_min: 3,
                y_min: 5,
                cols,
                rows,
                aoi_origin_tiles: (0.0, 0.0),
                aoi_size_tiles: (f64::from(cols), f64::from(rows)),
            };
            let tiles: Vec<RasterImage> = (0..rows * cols)
                .map(|i| RasterImage::from_gray_fn(PX, PX, move |x, y| (i * 64 + y * PX + x) as u8))
                .collect();
            let m = stitch(&grid, &tiles, PX).map_err(|e| e.to_string())?;
            if (m.width(), m.height()) != (cols * PX, rows * PX) {
                return Err(format!(
                    "{cols}x{rows}: mosaic is {}x{}",
                    m.width(),
                    m.height()
                ));
            }
            for y in 0..m.height() {
                for x in 0..m.width() {
                    let i = (y / PX) * cols + x / PX;
                    let want = tiles[i as usize].pixel(x % PX, y % PX);
                    if m.pixel(x, y) != want {
                        return Err(format!("{cols}x{rows}: pixel ({x}, {y}) wrong"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(checked)
}

/// Share of keypoints found again within `tol` px after rotating the image
/// by `deg` degrees. Only keypoints that stay well inside the rotated frame
/// are counted.
pub fn repeatability(img: &RasterImage, deg: f64, tol: f64) -> (usize, usize) {
    use issgeo::sift::{detect_and_describe, SiftParams};
    let params = SiftParams::default();
    let (rotated, forward) = rotate(img, deg);
    let base = detect_and_describe(img, &params).unwrap();
    let turned = detect_and_describe(&rotated, &params).unwrap();
    let (cx, cy) = (f64::from(img.width()) / 2.0, f64::from(img.height()) / 2.0);
    let radius = cx.min(cy) - 12.0;
    let (mut found, mut total) = (0, 0);
    for k in &base.keypoints {
        let (x, y) = (f64::from(k.x), f64::from(k.y));
        if (x - cx).hypot(y - cy) > radius {
            continue;
        }
        let (rx, ry) = forward(x, y);
        total += 1;
        if turned
            .keypoints
            .iter()
            .any(|t| (f64::from(t.x) - rx).hypot(f64::from(t.y) - ry) <= tol)
        {
            found += 1;
        }
    }
    (found, total)
}

/// Textured AOI with one query patch pasted at each listed window of a
/// `window`/`stride` grid; returns the AOI and the patch.
pub fn planted_aoi(
    seed: u64,
    size: u32,
    window: u32,
    stride: u32,
    at: &[(u32, u32)],
) -> (RasterImage, RasterImage) {
    let mut aoi = texture_scaled(seed, size, size, 16, 2.0).to_rgb();
    let patch = texture_scaled(seed ^ 0x5eed, window, window, 16, 2.0).to_rgb();
    for &(row, col) in at {
        aoi.paste(&patch, col * stride, row * stride);
    }
    (aoi, patch)
}

/// `n` records with rank-1 predictions; the first `hits` land about 11 km
/// from the ground truth, the rest about 556 km away.
pub fn scored_fixture(
    n: usize,
    hits: usize,
    seed: u64,
) -> (Vec<issgeo::BenchmarkRecord>, Vec<issgeo::MatchResult>) {
    use issgeo::{BenchmarkRecord, GeoPoint, MatchResult, Pipeline};
    let mut r = rng(seed);
    let mut records = Vec::with_capacity(n);
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let gt = GeoPoint::new(r.random_range(-60.0..60.0), r.random_range(-179.0..179.0)).unwrap();
        let id = format!("img{i:04}");
        records.push(BenchmarkRecord::new(&id, gt, gt));
        let shift = if i < hits { 0.1 } else { 5.0 };
        let mut m = MatchResult::new(&id, Pipeline::Nn, 1);
        m.predicted = Some(GeoPoint::new(gt.lat + shift, gt.lon).unwrap());
        results.push(m);
    }
    (records, results)
}

/// Records with rank-1 and rank-2 predictions at random distances (some
/// missing) from the ground truth.
pub fn random_fixture(seed: u64) -> (Vec<issgeo::BenchmarkRecord>, Vec<issgeo::MatchResult>) {
    use issgeo::{BenchmarkRecord, GeoPoint, MatchResult, Pipeline};
    let mut r = rng(seed);
    let n = r.random_range(1..60);
    let mut records = Vec::new();
    let mut results = Vec::new();
    for i in 0..n {
        let gt = GeoPoint::new(r.random_range(-60.0..60.0), r.random_range(-179.0..179.0)).unwrap();
        let id = format!("r{i}");
        records.push(BenchmarkRecord::new(&id, gt, gt));
        for rank in 1..=2u8 {
            if r.random_bool(0.2) {
                continue;
            }
            let mut m = MatchResult::new(&id, Pipeline::Sift, rank);
            m.predicted = Some(
                GeoPoint::new(
                    gt.lat + r.random_range(-2.0..2.0),
                    gt.lon + r.random_range(-1.0..1.0),
                )
                .unwrap(),
            );
            results.push(m);
        }
    }
    (records, results)
}

pub const SUEZ_RESPONSE: &str = "The image shows a distinctive geological feature: a narrow waterway running through an arid region, separating two larger landmasses with varying terrain. The presence of cloud formations near the water indicates that the image was taken from a significant altitude, fitting the perspective of the International Space Station.\n\nGiven the ISS location at approximately 33.40787°N latitude and 22.99734°E longitude, this places the ISS above Northeast Africa. The waterway shown in the image is very likely the Suez Canal, a man-made canal in Egypt that connects the Mediterranean Sea to the Red Sea, allowing for direct maritime passage between Europe and Asia without navigating around Africa.\n\nThe image shows the canal running from the top left to the bottom right, with the Sinai Peninsula to the right and the Eastern Desert of Egypt to the left. The northern end of the Red Sea is visible at the bottom right corner, and the Mediterranean Sea would be out of the frame at the top left corner.";

/// Five records with image files under `dir` and a replay transcript that
/// answers each of them.
pub fn replay_fixture(
    dir: &std::path::Path,
) -> (Vec<issgeo::BenchmarkRecord>, issgeo::vlm::ReplayBackend) {
    use issgeo::vlm::{build_prompt, ReplayBackend};
    use issgeo::{BenchmarkRecord, GeoPoint};
    let cases = [
        (
            "tana",
            12.0,
            37.3,
            "This looks like Lake Tana in Ethiopia, near 12.00000°N 37.30000°E.",
        ),
        ("chad", 13.1, 14.4, "Probably Lake Chad, at the Sahel."),
        ("suez", 30.5, 32.3, SUEZ_RESPONSE),
        (
            "kivu",
            -2.0,
            29.1,
            "Lake Kivu between Rwanda and Congo (-2.0, 29.1).",
        ),
        (
            "ocean",
            0.0,
            -30.0,
            "Open water with no identifiable landmarks.",
        ),
    ];
    let mut replay = ReplayBackend::default();
    let mut records = Vec::new();
    for (i, (id, lat, lon, answer)) in cases.into_iter().enumerate() {
        let p = GeoPoint::new(lat, lon).unwrap();
        let path = dir.join(format!("{id}.png"));
        let img = texture(100 + i as u64, 16, 16).encode_png().unwrap();
        std::fs::write(&path, &img).unwrap();
        replay.insert(&build_prompt(p, &img), answer);
        let mut r = BenchmarkRecord::new(id, p, p);
        r.image_path = path;
        records.push(r);
    }
    (records, replay)
}
