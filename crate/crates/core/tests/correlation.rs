mod common;

use common::{naive_correlation, random_map};
use issgeo::features::*;
use issgeo::geo::{aoi_bbox, GeoPoint, MercatorContext, PixelPoint};
use proptest::prelude::*;

const ENGINES: [CorrelationEngine; 3] = [
    CorrelationEngine::Direct,
    CorrelationEngine::Fft,
    CorrelationEngine::Auto,
];

fn shapes() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..=3, 1usize..=5, 1usize..=5)
        .prop_flat_map(|(c, qh, qw)| (Just(c), Just(qh), Just(qw), qh..=12usize, qw..=12usize))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn engines_match_the_oracle(
        (c, qh, qw, ah, aw) in shapes(),
        seed in any::<u64>(),
        levels in prop_oneof![Just(None), (2u32..5).prop_map(Some)],
    ) {
        let a = random_map(seed, c, ah, aw, levels);
        let q = random_map(seed ^ 0x9e37_79b9, c, qh, qw, levels);
        for (mode, normalized) in [(CorrelationMode::Raw, false), (CorrelationMode::Normalized, true)] {
            let expected = naive_correlation(&q, &a, normalized);
            for engine in ENGINES {
                match cross_correlate_with(&q, &a, mode, engine) {
                    Ok(s) => {
                        prop_assert_eq!(s.scores().len(), expected.len());
                        for (got, want) in s.scores().iter().zip(&expected) {
                            prop_assert!((got - want).abs() < 1e-9, "{:?} {:?}: {} vs {}", mode, engine, got, want);
                        }
                    }
                    Err(FeatureError::ZeroVarianceQuery) => {
                        prop_assert!(normalized);
                        for ch in 0..c {
                            let plane = q.channel(ch);
                            prop_assert!(plane.iter().all(|&v| v == plane[0]));
                        }
                    }
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }
    }

    #[test]
    fn global_mean_mode_equals_window_mean_mode((c, qh, qw, ah, aw) in shapes(), seed in any::<u64>()) {
        let a = random_map(seed, c, ah, aw, None);
        let q = random_map(!seed, c, qh, qw, None);
        let raw = cross_correlate_with(&q, &a, CorrelationMode::Raw, CorrelationEngine::Direct).unwrap();
        let global = cross_correlate_with(&q, &a, CorrelationMode::RawGlobalMean, CorrelationEngine::Direct).unwrap();
        for (x, y) in raw.scores().iter().zip(global.scores()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_is_bounded_and_affine_invariant(
        (c, qh, qw, ah, aw) in shapes(),
        seed in any::<u64>(),
        gain in 1u32..8,
        bias in 0u32..50,
    ) {
        let a = random_map(seed, c, ah, aw, Some(16));
        let q = random_map(seed.wrapping_add(1), c, qh, qw, Some(16));
        prop_assume!((0..c).all(|ch| q.channel(ch).iter().any(|&v| v != q.channel(ch)[0])));
        let base = cross_correlate(&q, &a, CorrelationMode::Normalized).unwrap();
        prop_assert!(base.scores().iter().all(|s| (-1.0..=1.0).contains(s)));
        let scaled: Vec<f32> = a.values().iter().map(|&v| v * gain as f32 + bias as f32).collect();
        let a2 = FeatureMap::new(c, ah, aw, 1, (0, 0), scaled).unwrap();
        let moved = cross_correlate(&q, &a2, CorrelationMode::Normalized).unwrap();
        for (x, y) in base.scores().iter().zip(moved.scores()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_crop_is_found((c, qh, qw, ah, aw) in shapes(), seed in any::<u64>(), fy in 0.0..1.0f64, fx in 0.0..1.0f64) {
        prop_assume!(qh * qw >= 4);
        let a = random_map(seed, c, ah, aw, None);
        let y = (fy * (ah - qh) as f64).round() as usize;
        let x = (fx * (aw - qw) as f64).round() as usize;
        let q = a.crop(y, x, qh, qw).unwrap();
        let s = cross_correlate(&q, &a, CorrelationMode::Normalized).unwrap();
        let (py, px, score) = s.argmax();
        prop_assert!((score - 1.0).abs() < 1e-9);
        prop_assert!(s.at(y, x) > 1.0 - 1e-9);
        prop_assert!((py, px) <= (y, x));
    }
}

#[test]
fn shape_and_mode_errors() {
    let a = random_map(1, 1, 6, 6, None);
    assert!(matches!(
        cross_correlate(&random_map(2, 1, 7, 3, None), &a, CorrelationMode::Raw),
        Err(FeatureError::QueryLargerThanReference { .. })
    ));
    assert!(matches!(
        cross_correlate(&random_map(2, 2, 3, 3, None), &a, CorrelationMode::Raw),
        Err(FeatureError::ChannelMismatch { .. })
    ));
    let flat = FeatureMap::new(1, 3, 3, 1, (0, 0), vec![4.0; 9]).unwrap();
    assert!(matches!(
        cross_correlate(&flat, &a, CorrelationMode::Normalized),
        Err(FeatureError::ZeroVarianceQuery)
    ));
    let raw = cross_correlate(&flat, &a, CorrelationMode::Raw).unwrap();
    assert!(raw.scores().iter().all(|&v| v == 0.0));
}

#[test]
fn back_projection_uses_cell_centre() {
    let ctx = MercatorContext::new(10.0, 256).unwrap();
    let geom = aoi_bbox(GeoPoint::new(45.0, 7.0).unwrap(), &ctx, 256.0, 256.0).unwrap();
    let img = common::texture(11, 256, 256);
    let query = img.crop(96, 40, 64, 64).unwrap();
    let m = nn_geolocate(
        &query,
        &img,
        &geom,
        &ExtractorSpec::MeanPool { pool: 8 },
        &NnOptions::default(),
    )
    .unwrap();
    assert_eq!(m.offset, (5, 12));
    assert_eq!(m.center_px, PixelPoint::new(96.0 + 32.0, 40.0 + 32.0));
    let expected = geom.local_to_geo(PixelPoint::new(128.0, 72.0)).unwrap();
    assert_eq!(m.result.predicted, Some(expected));
    assert!(m.peak_score > 0.999 && !m.low_confidence);
    assert!(m.runner_up_score.unwrap() < m.peak_score);
}
