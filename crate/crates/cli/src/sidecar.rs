//! `key=value` geometry file written next to a fetched AOI image.

use std::collections::HashMap;
use std::path::Path;

use issgeo::geo::{AoiGeometry, GeoPoint, MercatorContext, PixelPoint};

pub const EXTENSION: &str = "geom";

pub fn render(g: &AoiGeometry) -> String {
    let rows: [(&str, f64); 13] = [
        ("center_lat", g.center.lat),
        ("center_lon", g.center.lon),
        ("zoom", g.context.zoom()),
        ("tile_size", f64::from(g.context.tile_size())),
        ("width_px", g.width_px),
        ("height_px", g.height_px),
        ("top_left_lat", g.top_left_geo.lat),
        ("top_left_lon", g.top_left_geo.lon),
        ("bottom_right_lat", g.bottom_right_geo.lat),
        ("bottom_right_lon", g.bottom_right_geo.lon),
        ("top_left_world_x", g.top_left_world_px.x),
        ("top_left_world_y", g.top_left_world_px.y),
        ("km_per_px", g.km_per_px()),
    ];
    // Shortest round-trip formatting keeps the file lossless.
    rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse(text: &str) -> Result<AoiGeometry, String> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| format!("line {}: bad number {:?}", i + 1, v.trim()))?;
        map.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| format!("missing key {k}"))
    };
    let point = |lat: &str, lon: &str| -> Result<GeoPoint, String> {
        GeoPoint::new(get(lat)?, get(lon)?).map_err(|e| e.to_string())
    };
    let tile = get("tile_size")?;
    if tile.fract() != 0.0 || !(1.0..=65536.0).contains(&tile) {
        return Err(format!("bad tile_size {tile}"));
    }
    let context = MercatorContext::new(get("zoom")?, tile as u32).map_err(|e| e.to_string())?;
    Ok(AoiGeometry {
        center: point("center_lat", "center_lon")?,
        context,
        width_px: get("width_px")?,
        height_px: get("height_px")?,
        top_left_geo: point("top_left_lat", "top_left_lon")?,
        bottom_right_geo: point("bottom_right_lat", "bottom_right_lon")?,
        top_left_world_px: PixelPoint::new(get("top_left_world_x")?, get("top_left_world_y")?),
    })
}

pub fn load(path: &Path) -> Result<AoiGeometry, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}
