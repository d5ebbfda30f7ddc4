//! Web Mercator projection, AOI geometry, great-circle distance and camera
//! footprint estimation.
//!
//! World pixel coordinates follow the static-map convention: the world at zoom
//! `Z` with tile size `T` is a square of `S = 2^Z × T` pixels, `x` grows east
//! from the antimeridian and `y` grows south from the northern Mercator limit.
//! Fractional zooms are valid.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for all evaluation distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Northern/southern limit of the Web Mercator square, `2·atan(e^π) − 90°`.
pub const MAX_MERCATOR_LAT: f64 = 85.051_128_779_806_59;

/// Tile size used by static-map providers that render 512 px tiles.
pub const DEFAULT_TILE_SIZE: u32 = 512;

/// Altitude assumed for footprints when the capture carries none.
pub const DEFAULT_ALTITUDE_KM: f64 = 400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside the valid range")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("pixel ({x}, {y}) outside world square of size {size}")]
    PixelOutOfWorld { x: f64, y: f64, size: f64 },
    #[error("AOI corner ({x}, {y}) leaves world square of size {size}")]
    AoiExceedsWorld { x: f64, y: f64, size: f64 },
    #[error("AOI dimensions must be positive, got {width} x {height}")]
    InvalidAoiSize { width: f64, height: f64 },
    #[error("invalid zoom/tile size: zoom {zoom}, tile size {tile_size}")]
    InvalidContext { zoom: f64, tile_size: u32 },
    #[error("optics values must be positive: {0}")]
    NonPositiveOptics(&'static str),
    #[error("footprint needs an altitude")]
    MissingAltitude,
    #[error("area {0} km² is negative")]
    NegativeArea(f64),
}

impl GeoError {
    /// Stable variant name, used by the CLI when reporting failures.
    pub fn kind(&self) -> &'static str {
        match self {
            GeoError::LatitudeOutOfRange(_) => "LatitudeOutOfRange",
            GeoError::LongitudeOutOfRange(_) => "LongitudeOutOfRange",
            GeoError::NonFinite => "NonFinite",
            GeoError::PixelOutOfWorld { .. } => "PixelOutOfWorld",
            GeoError::AoiExceedsWorld { .. } => "AoiExceedsWorld",
            GeoError::InvalidAoiSize { .. } => "InvalidAoiSize",
            GeoError::InvalidContext { .. } => "InvalidContext",
            GeoError::NonPositiveOptics(_) => "NonPositiveOptics",
            GeoError::MissingAltitude => "MissingAltitude",
            GeoError::NegativeArea(_) => "NegativeArea",
        }
    }
}

/// Geographic position in decimal degrees (WGS84 / spherical).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validates `lat ∈ [-90, 90]` and `lon ∈ [-180, 180]`.
    ///
    /// Longitude is kept verbatim so that the eastern edge of the world
    /// (`lon = 180`) stays distinguishable from the western one. Use
    /// [`GeoPoint::wrapped`] for inputs that may lie outside that range.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LongitudeOutOfRange(lon));
        }
        Ok(Self { lat, lon })
    }

    /// Like [`GeoPoint::new`] but wraps any finite longitude into `[-180, 180)`.
    pub fn wrapped(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        let mut wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if wrapped >= 180.0 {
            wrapped -= 360.0;
        }
        Self::new(lat, wrapped)
    }

    pub fn in_mercator_band(&self) -> bool {
        self.lat.abs() <= MAX_MERCATOR_LAT
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

/// Position in world pixel space (fractional pixels allowed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Zoom level and tile size; fixes the world square `S = 2^zoom × tile_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MercatorContext {
    zoom: f64,
    tile_size: u32,
    scale: f64,
}

impl MercatorContext {
    pub fn new(zoom: f64, tile_size: u32) -> Result<Self, GeoError> {
        if !zoom.is_finite() || zoom < 0.0 || tile_size == 0 {
            return Err(GeoError::InvalidContext { zoom, tile_size });
        }
        let scale = 2f64.powf(zoom) * f64::from(tile_size);
        if !scale.is_finite() {
            return Err(GeoError::InvalidContext { zoom, tile_size });
        }
        Ok(Self {
            zoom,
            tile_size,
            scale,
        })
    }

    /// Context with the default 512 px tile.
    pub fn with_zoom(zoom: f64) -> Result<Self, GeoError> {
        Self::new(zoom, DEFAULT_TILE_SIZE)
    }

    pub fn zoom(&self) -> f64 {
        self.zoom
    }

    pub fn tile_size(&self) -> u32 {
        self.tile_size
    }

    /// World size in pixels.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Ground distance covered by one pixel at `lat` (km/px, spherical).
    pub fn km_per_px(&self, lat: f64) -> f64 {
        2.0 * PI * EARTH_RADIUS_KM * lat.to_radians().cos() / self.scale
    }
}

/// Projects a geographic point into world pixel space.
pub fn geo_to_pixel(p: GeoPoint, ctx: &MercatorContext) -> Result<PixelPoint, GeoError> {
    if !p.lat.is_finite() || !p.lon.is_finite() {
        return Err(GeoError::NonFinite);
    }
    if p.lat.abs() > MAX_MERCATOR_LAT {
        return Err(GeoError::LatitudeOutOfRange(p.lat));
    }
    let s = ctx.scale();
    let merc_y = (FRAC_PI_4 + p.lat.to_radians() / 2.0).tan().ln();
    // Keep the multiplication by S last so doubling the zoom doubles exactly.
    let x = ((p.lon + 180.0) / 360.0) * s;
    let y = (1.0 - merc_y / PI) * (s / 2.0);
    Ok(PixelPoint { x, y })
}

/// Inverse of [`geo_to_pixel`].
pub fn pixel_to_geo(p: PixelPoint, ctx: &MercatorContext) -> Result<GeoPoint, GeoError> {
    let s = ctx.scale();
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(GeoError::NonFinite);
    }
    if !(0.0..=s).contains(&p.x) || !(0.0..=s).contains(&p.y) {
        return Err(GeoError::PixelOutOfWorld {
            x: p.x,
            y: p.y,
            size: s,
        });
    }
    let lon = p.x / s * 360.0 - 180.0;
    let lat = (2.0 * ((1.0 - 2.0 * p.y / s) * PI).exp().atan() - FRAC_PI_2).to_degrees();
    Ok(GeoPoint { lat, lon })
}

/// Pixel window of the world map around a centre point, plus its corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoiGeometry {
    pub center: GeoPoint,
    pub context: MercatorContext,
    pub width_px: f64,
    pub height_px: f64,
    pub top_left_geo: GeoPoint,
    pub bottom_right_geo: GeoPoint,
    pub top_left_world_px: PixelPoint,
}

impl AoiGeometry {
    /// Maps a pixel position inside the AOI raster to geographic coordinates.
    pub fn local_to_geo(&self, local: PixelPoint) -> Result<GeoPoint, GeoError> {
        pixel_to_geo(
            PixelPoint::new(
                self.top_left_world_px.x + local.x,
                self.top_left_world_px.y + local.y,
            ),
            &self.context,
        )
    }

    /// Maps a geographic position to AOI-local pixel coordinates (may fall
    /// outside the raster).
    pub fn geo_to_local(&self, p: GeoPoint) -> Result<PixelPoint, GeoError> {
        let world = geo_to_pixel(p, &self.context)?;
        Ok(PixelPoint::new(
            world.x - self.top_left_world_px.x,
            world.y - self.top_left_world_px.y,
        ))
    }

    pub fn bottom_right_world_px(&self) -> PixelPoint {
        PixelPoint::new(
            self.top_left_world_px.x + self.width_px,
            self.top_left_world_px.y + self.height_px,
        )
    }

    /// Ground resolution at the AOI centre.
    pub fn km_per_px(&self) -> f64 {
        self.context.km_per_px(self.center.lat)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        match self.geo_to_local(p) {
            Ok(local) => {
                (0.0..=self.width_px).contains(&local.x)
                    && (0.0..=self.height_px).contains(&local.y)
            }
            Err(_) => false,
        }
    }
}

/// AOI of `width_px × height_px` pixels centred on `center`.
///
/// AOIs that would cross the antimeridian or the Mercator poles are rejected.
pub fn aoi_bbox(
    center: GeoPoint,
    ctx: &MercatorContext,
    width_px: f64,
    height_px: f64,
) -> Result<AoiGeometry, GeoError> {
    if !(width_px > 0.0 && height_px > 0.0 && width_px.is_finite() && height_px.is_finite()) {
        return Err(GeoError::InvalidAoiSize {
            width: width_px,
            height: height_px,
        });
    }
    let c = geo_to_pixel(center, ctx)?;
    let top_left = PixelPoint::new(c.x - width_px / 2.0, c.y - height_px / 2.0);
    let bottom_right = PixelPoint::new(c.x + width_px / 2.0, c.y + height_px / 2.0);
    build_aoi(center, ctx, top_left, bottom_right)
}

/// AOI spanning the given north-west and south-east corners.
pub fn aoi_from_bounds(
    north_west: GeoPoint,
    south_east: GeoPoint,
    ctx: &MercatorContext,
) -> Result<AoiGeometry, GeoError> {
    let top_left = geo_to_pixel(north_west, ctx)?;
    let bottom_right = geo_to_pixel(south_east, ctx)?;
    let width = bottom_right.x - top_left.x;
    let height = bottom_right.y - top_left.y;
    if !(width > 0.0 && height > 0.0) {
        return Err(GeoError::InvalidAoiSize { width, height });
    }
    let center = pixel_to_geo(
        PixelPoint::new(top_left.x + width / 2.0, top_left.y + height / 2.0),
        ctx,
    )?;
    build_aoi(center, ctx, top_left, bottom_right)
}

/// AOI covering roughly `extent_km × extent_km` of ground around `center`,
/// rendered at exactly `size_px × size_px` pixels.
///
/// The zoom is chosen (fractionally) so that the ground resolution at the
/// centre latitude equals `extent_km / size_px`.
pub fn aoi_for_extent(
    center: GeoPoint,
    extent_km: f64,
    size_px: u32,
    tile_size: u32,
) -> Result<AoiGeometry, GeoError> {
    if !(extent_km > 0.0) || size_px == 0 {
        return Err(GeoError::InvalidAoiSize {
            width: extent_km,
            height: f64::from(size_px),
        });
    }
    if center.lat.abs() > MAX_MERCATOR_LAT {
        return Err(GeoError::LatitudeOutOfRange(center.lat));
    }
    let circumference = 2.0 * PI * EARTH_RADIUS_KM * center.lat.to_radians().cos();
    let world_px = circumference * f64::from(size_px) / extent_km;
    let zoom = (world_px / f64::from(tile_size)).log2();
    let ctx = MercatorContext::new(zoom, tile_size)?;
    aoi_bbox(center, &ctx, f64::from(size_px), f64::from(size_px))
}

fn build_aoi(
    center: GeoPoint,
    ctx: &MercatorContext,
    top_left: PixelPoint,
    bottom_right: PixelPoint,
) -> Result<AoiGeometry, GeoError> {
    let s = ctx.scale();
    for corner in [top_left, bottom_right] {
        if !(0.0..=s).contains(&corner.x) || !(0.0..=s).contains(&corner.y) {
            return Err(GeoError::AoiExceedsWorld {
                x: corner.x,
                y: corner.y,
                size: s,
            });
        }
    }
    Ok(AoiGeometry {
        center,
        context: *ctx,
        width_px: bottom_right.x - top_left.x,
        height_px: bottom_right.y - top_left.y,
        top_left_geo: pixel_to_geo(top_left, ctx)?,
        bottom_right_geo: pixel_to_geo(bottom_right, ctx)?,
        top_left_world_px: top_left,
    })
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Lens and sensor description of a capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraOptics {
    pub focal_length_mm: f64,
    pub sensor_width_mm: f64,
    pub sensor_height_mm: f64,
    /// Platform altitude above ground; `None` means unknown.
    pub altitude_km: Option<f64>,
}

impl CameraOptics {
    pub fn new(
        focal_length_mm: f64,
        sensor_width_mm: f64,
        sensor_height_mm: f64,
    ) -> Result<Self, GeoError> {
        for (v, what) in [
            (focal_length_mm, "focal length"),
            (sensor_width_mm, "sensor width"),
            (sensor_height_mm, "sensor height"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GeoError::NonPositiveOptics(what));
            }
        }
        Ok(Self {
            focal_length_mm,
            sensor_width_mm,
            sensor_height_mm,
            altitude_km: Some(DEFAULT_ALTITUDE_KM),
        })
    }

    pub fn with_altitude(mut self, altitude_km: Option<f64>) -> Self {
        self.altitude_km = altitude_km;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensorAxis {
    Width,
    Height,
}

/// Angular field of view `2·atan(d / 2f)` in degrees along one sensor axis.
pub fn fov_degrees(optics: &CameraOptics, axis: SensorAxis) -> Result<f64, GeoError> {
    let d = match axis {
        SensorAxis::Width => optics.sensor_width_mm,
        SensorAxis::Height => optics.sensor_height_mm,
    };
    let f = optics.focal_length_mm;
    if !(f > 0.0) {
        return Err(GeoError::NonPositiveOptics("focal length"));
    }
    if !(d > 0.0) {
        return Err(GeoError::NonPositiveOptics("sensor dimension"));
    }
    Ok((2.0 * (d / (2.0 * f)).atan()).to_degrees())
}

/// Ground side lengths `(width_km, height_km)` of a nadir view over flat ground.
pub fn footprint_sides_km(optics: &CameraOptics) -> Result<(f64, f64), GeoError> {
    let h = optics.altitude_km.ok_or(GeoError::MissingAltitude)?;
    if !(h >= 0.0) {
        return Err(GeoError::NonPositiveOptics("altitude"));
    }
    fov_degrees(optics, SensorAxis::Width)?;
    fov_degrees(optics, SensorAxis::Height)?;
    // 2·h·tan(atan(d/2f)) collapses to h·d/f.
    let f = optics.focal_length_mm;
    Ok((
        h * optics.sensor_width_mm / f,
        h * optics.sensor_height_mm / f,
    ))
}

/// Imaged ground area in km².
pub fn footprint_area_km2(optics: &CameraOptics) -> Result<f64, GeoError> {
    let (w, h) = footprint_sides_km(optics)?;
    Ok(w * h)
}

/// Coverage bucket of an image, ordered by lower edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AreaCategory {
    Under1,
    From1To10,
    From10To50,
    From50To150,
    From150To300,
    Over300,
}

impl AreaCategory {
    pub const ALL: [AreaCategory; 6] = [
        AreaCategory::Under1,
        AreaCategory::From1To10,
        AreaCategory::From10To50,
        AreaCategory::From50To150,
        AreaCategory::From150To300,
        AreaCategory::Over300,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AreaCategory::Under1 => "<1 km²",
            AreaCategory::From1To10 => "[1,10)",
            AreaCategory::From10To50 => "[10,50)",
            AreaCategory::From50To150 => "[50,150)",
            AreaCategory::From150To300 => "[150,300)",
            AreaCategory::Over300 => "≥300 km²",
        }
    }

    /// Inclusive lower edge in km².
    pub fn lower_edge(&self) -> f64 {
        match self {
            AreaCategory::Under1 => 0.0,
            AreaCategory::From1To10 => 1.0,
            AreaCategory::From10To50 => 10.0,
            AreaCategory::From50To150 => 50.0,
            AreaCategory::From150To300 => 150.0,
            AreaCategory::Over300 => 300.0,
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for AreaCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Buckets an area into left-closed, right-open intervals.
pub fn categorize_area(area_km2: f64) -> Result<AreaCategory, GeoError> {
    if area_km2.is_nan() {
        return Err(GeoError::NonFinite);
    }
    if area_km2 < 0.0 {
        return Err(GeoError::NegativeArea(area_km2));
    }
    Ok(AreaCategory::ALL
        .into_iter()
        .rev()
        .find(|c| area_km2 >= c.lower_edge())
        .unwrap_or(AreaCategory::Under1))
}
