mod common;

use common::{random_fixture, scored_fixture};
use issgeo::bench::*;
use issgeo::geo::{AreaCategory, GeoPoint};
use issgeo::{MatchResult, Pipeline};
use proptest::prelude::*;

#[test]
fn rates_render_from_counts() {
    let (records, results) = scored_fixture(142, 107, 1);
    let report = evaluate(&results, &records, DEFAULT_THRESHOLD_KM, false).unwrap();
    assert_eq!(report.summary_line(), "overall 107/142 (75.35%)");
    let (records, results) = scored_fixture(142, 128, 2);
    let report = evaluate(&results, &records, DEFAULT_THRESHOLD_KM, false).unwrap();
    assert_eq!(report.success_rate(), "90.14");
}

#[test]
fn missing_results_count_as_failures() {
    let (records, mut results) = scored_fixture(10, 10, 3);
    results.truncate(6);
    let report = evaluate(&results, &records, DEFAULT_THRESHOLD_KM, false).unwrap();
    assert_eq!((report.successes(), report.scored()), (6, 10));
}

#[test]
fn category_table_sums_to_overall() {
    let (mut records, results) = scored_fixture(30, 20, 4);
    for (i, r) in records.iter_mut().enumerate() {
        r.area_category = AreaCategory::ALL.get(i % 7).copied();
    }
    let report = evaluate(&results, &records, DEFAULT_THRESHOLD_KM, false).unwrap();
    let table = aggregate_by_category(&report, &records);
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    let mut expected: Vec<&str> = AreaCategory::ALL.iter().map(|c| c.label()).collect();
    expected.extend([UNCATEGORIZED, "overall"]);
    assert_eq!(labels, expected);
    let body = &table.rows[..table.rows.len() - 1];
    assert_eq!(body.iter().map(|r| r.count).sum::<usize>(), 30);
    assert_eq!(body.iter().map(|r| r.successes).sum::<usize>(), 20);
    assert_eq!(table.overall().to_string(), "overall 20/30 (66.67%)");
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    let mut a = MatchResult::new("a,\"b\"", Pipeline::Vlm, 1);
    a.place_names = vec!["Lake Chad".into(), "Sahel, west".into()];
    a.score = 1.0;
    let mut b = MatchResult::new("c", Pipeline::Sift, 2);
    b.predicted = Some(GeoPoint::new(-12.345678, 100.000001).unwrap());
    b.runtime_s = 0.125;
    write_results_csv(&[a.clone(), b.clone()], &path).unwrap();
    assert_eq!(read_results_csv(&path).unwrap(), vec![a, b]);
}

fn result_strategy() -> impl Strategy<Value = MatchResult> {
    (
        "[a-zA-Z0-9_,\" -]{1,12}",
        prop_oneof![
            Just(Pipeline::Nn),
            Just(Pipeline::Sift),
            Just(Pipeline::Vlm)
        ],
        1u8..=2,
        proptest::option::of((-90_000_000i64..=90_000_000, -180_000_000i64..=180_000_000)),
        -1e6..1e6f64,
        proptest::collection::vec("[A-Za-z][A-Za-z ,'\"-]{0,15}", 0..4),
        0.0..1e4f64,
    )
        .prop_map(|(id, pipeline, rank, coords, score, names, runtime)| {
            let mut m = MatchResult::new(id, pipeline, rank);
            m.predicted =
                coords.map(|(la, lo)| GeoPoint::new(la as f64 / 1e6, lo as f64 / 1e6).unwrap());
            m.score = score;
            m.place_names = names;
            m.runtime_s = runtime;
            m
        })
}

proptest! {
    #[test]
    fn results_csv_round_trip(results in proptest::collection::vec(result_strategy(), 0..8)) {
        let text = results_to_csv(&results).unwrap();
        prop_assert_eq!(parse_results_csv(&text).unwrap(), results);
    }

    #[test]
    fn threshold_and_top2_are_monotone(seed in any::<u64>(), t1 in 0.0..300.0f64, t2 in 0.0..300.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (records, results) = random_fixture(seed);
        for top2 in [false, true] {
            let a = evaluate(&results, &records, lo, top2).unwrap();
            let b = evaluate(&results, &records, hi, top2).unwrap();
            prop_assert!(a.successes() <= b.successes());
        }
        for t in [lo, hi] {
            let one = evaluate(&results, &records, t, false).unwrap();
            let two = evaluate(&results, &records, t, true).unwrap();
            prop_assert!(one.successes() <= two.successes());
            prop_assert_eq!(one.scored(), records.len());
        }
    }

    #[test]
    fn rate_matches_exact_rounding(num in 0usize..10_000, extra in 0usize..10_000) {
        let den = num + extra;
        prop_assume!(den > 0);
        let rate = format_rate(num, den);
        let (whole, frac) = rate.split_once('.').unwrap();
        let hundredths: u128 = whole.parse::<u128>().unwrap() * 100 + frac.parse::<u128>().unwrap();
        // Round half up: |10000·num/den − hundredths| ≤ 1/2.
        let scaled = 10_000 * num as u128;
        prop_assert!(2 * scaled + den as u128 >= 2 * hundredths * den as u128);
        prop_assert!(2 * scaled < (2 * hundredths + 1) * den as u128);
    }
}

#[test]
fn manifest_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    let text = format!(
        "{MANIFEST_HEADER}\nx1,img/x1.jpg,30.0,31.0,30.1,31.2,,,,12.5,Cairo;Al Qahirah\nx2,/abs/x2.jpg,0,0,1,1,,,,,\n"
    );
    std::fs::write(&path, text).unwrap();
    let records = load_manifest(&path).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].image_path, dir.path().join("img/x1.jpg"));
    assert_eq!(
        records[0].aliases,
        vec!["Cairo".to_string(), "Al Qahirah".to_string()]
    );
    assert_eq!(records[0].category_label(), AreaCategory::ALL[2].label());
    assert_eq!(records[1].category_label(), UNCATEGORIZED);
    std::fs::write(
        &path,
        format!("{MANIFEST_HEADER}\nx1,a,1,1,1,1,,,,,\nx1,b,1,1,1,1,,,,,\n"),
    )
    .unwrap();
    assert!(matches!(
        load_manifest(&path),
        Err(BenchError::DuplicateImageId(_))
    ));
}

#[test]
fn plot_data_files() {
    let dir = tempfile::tempdir().unwrap();
    let (records, results) = scored_fixture(5, 3, 9);
    let report = evaluate(&results, &records, DEFAULT_THRESHOLD_KM, false).unwrap();
    emit_plot_data(&records, Some(&report), dir.path()).unwrap();
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 2, "{names:?}");
    let geo = distribution_geojson(&records, Some(&report));
    assert_eq!(geo["features"].as_array().unwrap().len(), 15);
}
