//! Map imagery for an AOI: slippy-map tile enumeration, cache-first fetching
//! with rate limiting and retries, offline fixtures, and mosaic stitching.
//!
//! On-disk layouts:
//!
//! * fixtures: `{fixture_dir}/{z}/{x}/{y}.png`, static maps under
//!   `{fixture_dir}/static/{lat}_{lon}_{zoom}_{w}x{h}.png`
//! * cache: the same layout below `{cache_dir}/{template_hash}/`, holding the
//!   provider's original encoded bytes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::geo::{AoiGeometry, GeoError};
use crate::net::{Clock, HttpTransport, RateLimiter, RetryPolicy, TransportError};
use crate::raster::{RasterError, RasterImage};

pub const MAX_TILE_ZOOM: u8 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(z: u8, x: u32, y: u32) -> Result<Self, TileError> {
        if z > MAX_TILE_ZOOM {
            return Err(TileError::ZoomOutOfRange(i64::from(z)));
        }
        let n = 1u32 << z;
        if x >= n || y >= n {
            return Err(TileError::TileOutOfRange(TileCoord { z, x, y }));
        }
        Ok(Self { z, x, y })
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.z, self.x, self.y)
    }
}

#[derive(Debug, Error)]
pub enum TileError {
    #[error("tile zoom {0} outside 0..=22")]
    ZoomOutOfRange(i64),
    #[error("tile {0} outside its zoom level")]
    TileOutOfRange(TileCoord),
    #[error("network error for {target}: {reason}")]
    NetworkError { target: String, reason: String },
    #[error("offline mode and {0} is neither cached nor in the fixtures")]
    OfflineMiss(String),
    #[error("could not decode {target}: {reason}")]
    DecodeError { target: String, reason: String },
    #[error("tile {0} missing from stitch input")]
    MissingTile(TileCoord),
    #[error("tile {tile} is {width}x{height}, expected {expected}x{expected}")]
    InconsistentTileSize {
        tile: TileCoord,
        width: u32,
        height: u32,
        expected: u32,
    },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TileError {
    pub fn kind(&self) -> &'static str {
        match self {
            TileError::ZoomOutOfRange(_) => "ZoomOutOfRange",
            TileError::TileOutOfRange(_) => "TileOutOfRange",
            TileError::NetworkError { .. } => "NetworkError",
            TileError::OfflineMiss(_) => "OfflineMiss",
            TileError::DecodeError { .. } => "DecodeError",
            TileError::MissingTile(_) => "MissingTile",
            TileError::InconsistentTileSize { .. } => "InconsistentTileSize",
            TileError::Config(_) => "ProviderConfigError",
            TileError::Geo(e) => e.kind(),
            TileError::Raster(e) => e.kind(),
            TileError::Io(_) => "IoError",
        }
    }
}

/// Minimal block of tiles covering an AOI at one integer zoom.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub z: u8,
    pub x_min: u32,
    pub y_min: u32,
    pub cols: u32,
    pub rows: u32,
    /// AOI top-left relative to the grid's top-left, in tile units.
    pub aoi_origin_tiles: (f64, f64),
    /// AOI extent in tile units.
    pub aoi_size_tiles: (f64, f64),
}

impl TileGrid {
    /// Tiles in row-major order.
    pub fn tiles(&self) -> Vec<TileCoord> {
        (0..self.rows)
            .flat_map(|r| {
                (0..self.cols).map(move |c| TileCoord {
                    z: self.z,
                    x: self.x_min + c,
                    y: self.y_min + r,
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel offset of the AOI's top-left corner inside the stitched mosaic.
    pub fn aoi_offset_px(&self, tile_px: u32) -> (f64, f64) {
        let t = f64::from(tile_px);
        (self.aoi_origin_tiles.0 * t, self.aoi_origin_tiles.1 * t)
    }

    /// Pixel extent of the AOI inside the stitched mosaic.
    pub fn aoi_size_px(&self, tile_px: u32) -> (f64, f64) {
        let t = f64::from(tile_px);
        (self.aoi_size_tiles.0 * t, self.aoi_size_tiles.1 * t)
    }
}

/// Tiles at integer zoom `z` covering the AOI.
pub fn tiles_for_bbox(aoi: &AoiGeometry, z: i64) -> Result<TileGrid, TileError> {
    if !(0..=i64::from(MAX_TILE_ZOOM)).contains(&z) {
        return Err(TileError::ZoomOutOfRange(z));
    }
    let z = z as u8;
    let n = f64::from(1u32 << z);
    // World pixels → tile units at z.
    let to_tiles = n / aoi.context.scale();
    let tl = aoi.top_left_world_px;
    let br = aoi.bottom_right_world_px();
    let (fx0, fy0) = (tl.x * to_tiles, tl.y * to_tiles);
    let (fx1, fy1) = (br.x * to_tiles, br.y * to_tiles);
    let max_index = (1u32 << z) - 1;
    let first = |f: f64| (f.floor().max(0.0) as u32).min(max_index);
    // The far edge is exclusive: an edge exactly on a tile boundary does not
    // pull in the next tile.
    let last = |f: f64, lo: u32| ((f.ceil() - 1.0).max(f64::from(lo)) as u32).min(max_index);
    let (x_min, y_min) = (first(fx0), first(fy0));
    let (x_max, y_max) = (last(fx1, x_min), last(fy1, y_min));
    Ok(TileGrid {
        z,
        x_min,
        y_min,
        cols: x_max - x_min + 1,
        rows: y_max - y_min + 1,
        aoi_origin_tiles: (fx0 - f64::from(x_min), fy0 - f64::from(y_min)),
        aoi_size_tiles: (fx1 - fx0, fy1 - fy0),
    })
}

/// Smallest integer zoom whose native resolution is at least the AOI's.
pub fn mosaic_zoom(aoi: &AoiGeometry, tile_px: u32) -> Result<u8, TileError> {
    let ratio = aoi.context.scale() / f64::from(tile_px);
    let z = ratio.log2().ceil().max(0.0);
    if z > f64::from(MAX_TILE_ZOOM) {
        return Err(TileError::ZoomOutOfRange(z as i64));
    }
    Ok(z as u8)
}

/// Where imagery comes from and how politely to ask for it.
#[derive(Debug, Clone)]
pub struct ProviderConfig {
    /// XYZ template with `{z}`, `{x}`, `{y}` (and optionally `{key}`), or a
    /// static-map template with `{lat}`, `{lon}`, `{zoom}`, `{width}`,
    /// `{height}`.
    pub endpoint_template: String,
    pub api_key: Option<String>,
    pub tile_px: u32,
    /// Requests per second; `<= 0` disables limiting.
    pub rate_limit: f64,
    pub cache_dir: Option<PathBuf>,
    pub fixture_dir: Option<PathBuf>,
    pub offline: bool,
    pub retry: RetryPolicy,
    pub jobs: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_template: String::new(),
            api_key: None,
            tile_px: 256,
            rate_limit: 4.0,
            cache_dir: None,
            fixture_dir: None,
            offline: false,
            retry: RetryPolicy::default(),
            jobs: 1,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), TileError> {
        if self.tile_px != 256 && self.tile_px != 512 {
            return Err(TileError::Config(format!(
                "tile_px must be 256 or 512, got {}",
                self.tile_px
            )));
        }
        if self.jobs == 0 {
            return Err(TileError::Config("jobs must be at least 1".into()));
        }
        if !self.offline && self.endpoint_template.is_empty() {
            return Err(TileError::Config(
                "endpoint template required when online".into(),
            ));
        }
        Ok(())
    }

    fn template_hash(&self) -> String {
        let digest = Sha256::digest(self.endpoint_template.as_bytes());
        hex::encode(&digest[..8])
    }

    fn cache_root(&self) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| d.join(self.template_hash()))
    }
}

/// A static-map request: one image centred on a point at a fractional zoom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticRequest {
    pub lat: f64,
    pub lon: f64,
    pub zoom: f64,
    pub width: u32,
    pub height: u32,
}

impl StaticRequest {
    pub fn for_aoi(aoi: &AoiGeometry) -> Self {
        Self {
            lat: aoi.center.lat,
            lon: aoi.center.lon,
            zoom: aoi.context.zoom(),
            width: aoi.width_px.round() as u32,
            height: aoi.height_px.round() as u32,
        }
    }

    fn file_name(&self) -> String {
        format!(
            "{:.5}_{:.5}_{}_{}x{}.png",
            self.lat, self.lon, self.zoom, self.width, self.height
        )
    }
}

enum Target {
    Tile(TileCoord),
    Static(StaticRequest),
}

impl Target {
    fn relative_path(&self) -> PathBuf {
        match self {
            Target::Tile(t) => Path::new(&t.z.to_string())
                .join(t.x.to_string())
                .join(format!("{}.png", t.y)),
            Target::Static(s) => Path::new("static").join(s.file_name()),
        }
    }

    fn label(&self) -> String {
        match self {
            Target::Tile(t) => format!("tile {t}"),
            Target::Static(s) => format!("static map {}", s.file_name()),
        }
    }
}

/// Cache-first imagery fetcher bound to one provider.
pub struct TileFetcher<'a> {
    cfg: ProviderConfig,
    transport: &'a dyn HttpTransport,
    clock: &'a dyn Clock,
    limiter: RateLimiter,
    requests: AtomicUsize,
    progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

impl<'a> TileFetcher<'a> {
    pub fn new(
        cfg: ProviderConfig,
        transport: &'a dyn HttpTransport,
        clock: &'a dyn Clock,
    ) -> Result<Self, TileError> {
        cfg.validate()?;
        let limiter = RateLimiter::new(cfg.rate_limit);
        Ok(Self {
            cfg,
            transport,
            clock,
            limiter,
            requests: AtomicUsize::new(0),
            progress: None,
        })
    }

    /// Reports `(tiles done, total)` while fetching.
    pub fn with_progress(mut self, f: &'a (dyn Fn(usize, usize) + Sync)) -> Self {
        self.progress = Some(f);
        self
    }

    /// Network requests issued so far (including failed attempts).
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    /// One decoded RGB image per tile of `grid`, in row-major order.
    pub fn fetch_tiles(&self, grid: &TileGrid) -> Result<Vec<RasterImage>, TileError> {
        let coords = grid.tiles();
        let total = coords.len();
        let done = AtomicUsize::new(0);
        let fetch_one = |t: &TileCoord| -> Result<RasterImage, TileError> {
            let img = self.fetch_target(&Target::Tile(*t))?;
            if img.width() != self.cfg.tile_px || img.height() != self.cfg.tile_px {
                return Err(TileError::InconsistentTileSize {
                    tile: *t,
                    width: img.width(),
                    height: img.height(),
                    expected: self.cfg.tile_px,
                });
            }
            let n = done.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(p) = self.progress {
                p(n, total);
            }
            Ok(img)
        };
        if self.cfg.jobs <= 1 {
            return coords.iter().map(fetch_one).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.jobs)
            .build()
            .map_err(|e| TileError::Config(e.to_string()))?;
        pool.install(|| coords.par_iter().map(fetch_one).collect())
    }

    /// A single static-map image for the request.
    pub fn fetch_static(&self, req: &StaticRequest) -> Result<RasterImage, TileError> {
        self.fetch_target(&Target::Static(*req))
    }

    fn fetch_target(&self, target: &Target) -> Result<RasterImage, TileError> {
        let bytes = self.load_bytes(target)?;
        RasterImage::decode(&bytes).map_err(|e| TileError::DecodeError {
            target: target.label(),
            reason: e.to_string(),
        })
    }

    fn load_bytes(&self, target: &Target) -> Result<Vec<u8>, TileError> {
        let rel = target.relative_path();
        if let Some(root) = self.cfg.cache_root() {
            if let Ok(bytes) = std::fs::read(root.join(&rel)) {
                return Ok(bytes);
            }
        }
        if let Some(dir) = &self.cfg.fixture_dir {
            if let Ok(bytes) = std::fs::read(dir.join(&rel)) {
                return Ok(bytes);
            }
        }
        if self.cfg.offline {
            return Err(TileError::OfflineMiss(target.label()));
        }
        let bytes = self.download(target)?;
        if let Some(root) = self.cfg.cache_root() {
            atomic_write(&root.join(&rel), &bytes)?;
        }
        Ok(bytes)
    }

    fn url_for(&self, target: &Target) -> String {
        let key = self.cfg.api_key.as_deref().unwrap_or("");
        let t = self.cfg.endpoint_template.replace("{key}", key);
        match target {
            Target::Tile(c) => t
                .replace("{z}", &c.z.to_string())
                .replace("{x}", &c.x.to_string())
                .replace("{y}", &c.y.to_string()),
            Target::Static(s) => t
                .replace("{lat}", &format!("{:.5}", s.lat))
                .replace("{lon}", &format!("{:.5}", s.lon))
                .replace("{zoom}", &s.zoom.to_string())
                .replace("{width}", &s.width.to_string())
                .replace("{height}", &s.height.to_string()),
        }
    }

    fn download(&self, target: &Target) -> Result<Vec<u8>, TileError> {
        let url = self.url_for(target);
        let attempts = self.cfg.retry.attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.clock.sleep(self.cfg.retry.delay_after(attempt - 1));
            }
            self.limiter.acquire(self.clock);
            self.requests.fetch_add(1, Ordering::SeqCst);
            match self.transport.get(&url, &[]) {
                Ok(resp) if resp.is_success() => return Ok(resp.body),
                Ok(resp) if resp.is_transient() => {
                    last_error = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    return Err(TileError::NetworkError {
                        target: target.label(),
                        reason: format!("HTTP {}", resp.status),
                    })
                }
                Err(TransportError::Forbidden(u)) => {
                    return Err(TileError::NetworkError {
                        target: target.label(),
                        reason: format!("network forbidden: {u}"),
                    })
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(TileError::NetworkError {
            target: target.label(),
            reason: format!("{last_error} after {attempts} attempts"),
        })
    }
}

/// Assembles grid tiles into a `(cols·tile_px) × (rows·tile_px)` mosaic.
pub fn stitch(
    grid: &TileGrid,
    tiles: &[RasterImage],
    tile_px: u32,
) -> Result<RasterImage, TileError> {
    let coords = grid.tiles();
    if tiles.len() < coords.len() {
        return Err(TileError::MissingTile(coords[tiles.len()]));
    }
    let channels = if tiles.iter().all(|t| t.channels() == 1) {
        1
    } else {
        3
    };
    let fill = vec![0u8; channels as usize];
    let mut mosaic = RasterImage::filled(grid.cols * tile_px, grid.rows * tile_px, &fill)?;
    for (i, (coord, tile)) in coords.iter().zip(tiles).enumerate() {
        if tile.width() != tile_px || tile.height() != tile_px {
            return Err(TileError::InconsistentTileSize {
                tile: *coord,
                width: tile.width(),
                height: tile.height(),
                expected: tile_px,
            });
        }
        let (r, c) = (i as u32 / grid.cols, i as u32 % grid.cols);
        mosaic.paste(tile, c * tile_px, r * tile_px);
    }
    Ok(mosaic)
}

/// Cuts the AOI out of a stitched mosaic and resamples it to the AOI's pixel
/// size, so that raster pixels line up with the AOI geometry.
pub fn crop_to_aoi(
    mosaic: &RasterImage,
    grid: &TileGrid,
    tile_px: u32,
    aoi: &AoiGeometry,
) -> Result<RasterImage, TileError> {
    let (ox, oy) = grid.aoi_offset_px(tile_px);
    let (w, h) = grid.aoi_size_px(tile_px);
    let x0 = ox.floor().max(0.0) as u32;
    let y0 = oy.floor().max(0.0) as u32;
    let x1 = ((ox + w).ceil() as u32).min(mosaic.width());
    let y1 = ((oy + h).ceil() as u32).min(mosaic.height());
    let cropped = mosaic.crop(
        x0,
        y0,
        x1.saturating_sub(x0).max(1),
        y1.saturating_sub(y0).max(1),
    )?;
    let out_w = aoi.width_px.round().max(1.0) as u32;
    let out_h = aoi.height_px.round().max(1.0) as u32;
    Ok(cropped.resize(out_w, out_h))
}

/// Fetches, stitches and crops the imagery for `aoi` at the smallest
/// integer zoom whose native resolution is at least the AOI's.
pub fn build_mosaic(
    aoi: &AoiGeometry,
    fetcher: &TileFetcher<'_>,
) -> Result<RasterImage, TileError> {
    let tile_px = fetcher.config().tile_px;
    let z = mosaic_zoom(aoi, tile_px)?;
    let grid = tiles_for_bbox(aoi, i64::from(z))?;
    let tiles = fetcher.fetch_tiles(&grid)?;
    let mosaic = stitch(&grid, &tiles, tile_px)?;
    crop_to_aoi(&mosaic, &grid, tile_px, aoi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{aoi_bbox, aoi_from_bounds, GeoPoint, MercatorContext};

    fn world(z: f64, tile: u32) -> AoiGeometry {
        let ctx = MercatorContext::new(z, tile).unwrap();
        let s = ctx.scale();
        aoi_bbox(GeoPoint::new(0.0, 0.0).unwrap(), &ctx, s, s).unwrap()
    }

    #[test]
    fn whole_world_grids() {
        let g0 = tiles_for_bbox(&world(0.0, 512), 0).unwrap();
        assert_eq!(g0.tiles(), vec![TileCoord { z: 0, x: 0, y: 0 }]);
        let g1 = tiles_for_bbox(&world(0.0, 512), 1).unwrap();
        assert_eq!((g1.cols, g1.rows), (2, 2));
        assert_eq!(
            g1.tiles(),
            vec![
                TileCoord { z: 1, x: 0, y: 0 },
                TileCoord { z: 1, x: 1, y: 0 },
                TileCoord { z: 1, x: 0, y: 1 },
                TileCoord { z: 1, x: 1, y: 1 },
            ]
        );
    }

    #[test]
    fn zoom_limits() {
        assert!(matches!(
            tiles_for_bbox(&world(0.0, 512), 23),
            Err(TileError::ZoomOutOfRange(23))
        ));
        assert!(matches!(
            tiles_for_bbox(&world(0.0, 512), -1),
            Err(TileError::ZoomOutOfRange(-1))
        ));
        assert!(TileCoord::new(2, 4, 0).is_err());
    }

    /// Standard slippy-map index of the tile containing a point.
    fn oracle_tile(lat: f64, lon: f64, z: u32) -> (u32, u32) {
        let n = f64::from(1u32 << z);
        let x = ((lon + 180.0) / 360.0 * n).floor() as u32;
        let y = ((1.0 - lat.to_radians().tan().asinh() / std::f64::consts::PI) / 2.0 * n).floor()
            as u32;
        (x, y)
    }

    #[test]
    fn one_degree_box_matches_index_oracle() {
        let (lat, lon) = (33.40787, 22.99734);
        let ctx = MercatorContext::with_zoom(9.5).unwrap();
        let nw = GeoPoint::new(lat + 0.5, lon - 0.5).unwrap();
        let se = GeoPoint::new(lat - 0.5, lon + 0.5).unwrap();
        let aoi = aoi_from_bounds(nw, se, &ctx).unwrap();
        let grid = tiles_for_bbox(&aoi, 10).unwrap();
        let (x0, y0) = oracle_tile(nw.lat, nw.lon, 10);
        let (x1, y1) = oracle_tile(se.lat, se.lon, 10);
        // mpmath oracle: nw (575, 409), se (578, 412)
        assert_eq!((x0, y0, x1, y1), (575, 409, 578, 412));
        assert_eq!((grid.x_min, grid.y_min), (x0, y0));
        assert_eq!(
            (grid.x_min + grid.cols - 1, grid.y_min + grid.rows - 1),
            (x1, y1)
        );
    }

    #[test]
    fn mosaic_zoom_meets_resolution() {
        let aoi = world(9.5, 512);
        // 2^9.5·512 px needs 2^z·256 ≥ that → z = 11.
        assert_eq!(mosaic_zoom(&aoi, 256).unwrap(), 11);
        assert_eq!(mosaic_zoom(&aoi, 512).unwrap(), 10);
    }

    #[test]
    fn stitch_dimensions_and_identity() {
        let grid = tiles_for_bbox(&world(0.0, 512), 1).unwrap();
        let tiles: Vec<_> = (0..4u8)
            .map(|v| RasterImage::filled(256, 256, &[v * 60]).unwrap())
            .collect();
        let m = stitch(&grid, &tiles, 256).unwrap();
        assert_eq!((m.width(), m.height()), (512, 512));
        assert_eq!(m.pixel(300, 10), &[60]);
        assert_eq!(m.pixel(10, 300), &[120]);

        let single = tiles_for_bbox(&world(0.0, 512), 0).unwrap();
        let tile = RasterImage::from_gray_fn(256, 256, |x, y| (x ^ y) as u8);
        assert_eq!(stitch(&single, &[tile.clone()], 256).unwrap(), tile);
    }

    #[test]
    fn stitch_rejects_bad_input() {
        let grid = tiles_for_bbox(&world(0.0, 512), 1).unwrap();
        let tiles = vec![RasterImage::filled(8, 8, &[0]).unwrap(); 3];
        assert!(matches!(
            stitch(&grid, &tiles, 8),
            Err(TileError::MissingTile(_))
        ));
        let mut tiles = vec![RasterImage::filled(8, 8, &[0]).unwrap(); 4];
        tiles[2] = RasterImage::filled(8, 7, &[0]).unwrap();
        assert!(matches!(
            stitch(&grid, &tiles, 8),
            Err(TileError::InconsistentTileSize { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = ProviderConfig {
            tile_px: 300,
            offline: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ProviderConfig {
            offline: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ProviderConfig {
            offline: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }
}
