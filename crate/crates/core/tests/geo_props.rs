use issgeo::geo::*;
use proptest::prelude::*;

fn lat() -> impl Strategy<Value = f64> {
    -MAX_MERCATOR_LAT..=MAX_MERCATOR_LAT
}

fn lon() -> impl Strategy<Value = f64> {
    -180.0..180.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mercator_round_trip(lat in lat(), lon in lon(), zoom in 0.0..22.0f64) {
        let ctx = MercatorContext::with_zoom(zoom).unwrap();
        let p = GeoPoint::new(lat, lon).unwrap();
        let back = pixel_to_geo(geo_to_pixel(p, &ctx).unwrap(), &ctx).unwrap();
        prop_assert!((back.lat - lat).abs() < 1e-6);
        prop_assert!((back.lon - lon).abs() < 1e-6);
    }

    #[test]
    fn pixel_stays_in_world(lat in lat(), lon in lon(), zoom in 0.0..22.0f64) {
        let ctx = MercatorContext::with_zoom(zoom).unwrap();
        let px = geo_to_pixel(GeoPoint::new(lat, lon).unwrap(), &ctx).unwrap();
        prop_assert!((0.0..=ctx.scale()).contains(&px.x));
        prop_assert!((0.0..=ctx.scale()).contains(&px.y));
    }

    #[test]
    fn y_decreases_with_latitude(a in lat(), b in lat(), lon in lon()) {
        prop_assume!(a < b);
        let ctx = MercatorContext::with_zoom(5.0).unwrap();
        let pa = geo_to_pixel(GeoPoint::new(a, lon).unwrap(), &ctx).unwrap();
        let pb = geo_to_pixel(GeoPoint::new(b, lon).unwrap(), &ctx).unwrap();
        prop_assert!(pb.y <= pa.y);
    }

    #[test]
    fn haversine_symmetric_and_bounded(a in (-90.0..=90.0f64, lon()), b in (-90.0..=90.0f64, lon())) {
        let p = GeoPoint::new(a.0, a.1).unwrap();
        let q = GeoPoint::new(b.0, b.1).unwrap();
        let d = haversine_km(p, q);
        prop_assert!((d - haversine_km(q, p)).abs() < 1e-9);
        prop_assert!(d >= 0.0 && d <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
        prop_assert!(haversine_km(p, p) < 1e-9);
    }

    #[test]
    fn aoi_local_round_trip(lat in -70.0..70.0f64, lon in -170.0..170.0f64, u in 0.0..1.0f64, v in 0.0..1.0f64) {
        let ctx = MercatorContext::with_zoom(9.5).unwrap();
        let aoi = aoi_bbox(GeoPoint::new(lat, lon).unwrap(), &ctx, 1024.0, 768.0).unwrap();
        let local = PixelPoint::new(u * aoi.width_px, v * aoi.height_px);
        let g = aoi.local_to_geo(local).unwrap();
        let back = aoi.geo_to_local(g).unwrap();
        prop_assert!((back.x - local.x).abs() < 1e-6 && (back.y - local.y).abs() < 1e-6);
        prop_assert!(aoi.contains(g));
    }

    #[test]
    fn footprint_area_scales_with_altitude_squared(f in 10.0..1200.0f64, h in 100.0..500.0f64) {
        let o = CameraOptics::new(f, 36.0, 24.0).unwrap();
        let a1 = footprint_area_km2(&o.with_altitude(Some(h))).unwrap();
        let a2 = footprint_area_km2(&o.with_altitude(Some(2.0 * h))).unwrap();
        prop_assert!((a2 / a1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn categories_are_monotone(a in 0.0..1000.0f64, b in 0.0..1000.0f64) {
        prop_assume!(a <= b);
        prop_assert!(categorize_area(a).unwrap() <= categorize_area(b).unwrap());
        let c = categorize_area(a).unwrap();
        prop_assert!(c.lower_edge() <= a);
    }
}

#[test]
fn category_edges_are_left_closed() {
    let edges = [0.0, 1.0, 10.0, 50.0, 150.0, 300.0];
    for (cat, edge) in AreaCategory::ALL.iter().zip(edges) {
        assert_eq!(categorize_area(edge).unwrap(), *cat);
        assert_eq!(AreaCategory::from_label(cat.label()), Some(*cat));
    }
    assert_eq!(categorize_area(0.999_999).unwrap(), AreaCategory::Under1);
    assert!(categorize_area(-1.0).is_err());
}
