mod common;

use std::f64::consts::TAU;

use proptest::prelude::*;
use xview::{polar_source_coords, polar_transform, OutOfBounds, PolarParams, RasterImage, ValueRange};

#[test]
fn source_coordinate_examples_hold_exactly() {
    let p = PolarParams::new(100, 10, 40);
    for x in [0.0, 3.0, 17.5, 39.0] {
        assert_eq!(polar_source_coords(x, 0.0, &p), (50.0, 50.0));
    }
    assert_eq!(polar_source_coords(0.0, 10.0, &p), (50.0, 0.0));
    let (xs, ys) = polar_source_coords(10.0, 10.0, &p);
    assert_eq!(xs, 100.0);
    assert!((ys - 50.0).abs() < 1e-12, "{ys}");
}

#[test]
fn rotation_shifts_columns() {
    let n = 128;
    let p = PolarParams::new(n, 32, 128);
    let mut rng = common::rng(11);
    for trial in 0..20 {
        let sat = common::smooth_field(&mut rng, 1, n);
        let m = 1 + trial * 5 % 127;
        let err = common::equivariance_error(&sat, &p, m);
        assert!(err < 0.02, "trial {trial}, shift {m}: {err}");
    }
}

#[test]
fn rows_sample_circles() {
    let p = PolarParams::new(96, 24, 132);
    for y in 0..24 {
        let r = y as f64 / 24.0 * 48.0;
        for x in 0..132 {
            let (xs, ys) = polar_source_coords(x as f64, y as f64, &p);
            let d = ((xs - 48.0).powi(2) + (ys - 48.0).powi(2)).sqrt();
            assert!((d - r).abs() < 1e-6, "row {y} col {x}: {d} vs {r}");
        }
    }
}

#[test]
fn column_azimuth_runs_clockwise_from_north() {
    let p = PolarParams::new(64, 16, 64);
    let (xs, ys) = polar_source_coords(16.0, 16.0, &p);
    assert!((xs - 64.0).abs() < 1e-9 && (ys - 32.0).abs() < 1e-9);
    let (xs, ys) = polar_source_coords(32.0, 16.0, &p);
    assert!((xs - 32.0).abs() < 1e-9 && (ys - 64.0).abs() < 1e-9);
    let th = TAU * 48.0 / 64.0;
    let (xs, _) = polar_source_coords(48.0, 8.0, &p);
    assert!((xs - (32.0 + 16.0 * th.sin())).abs() < 1e-9);
    assert!(xs < 32.0);
}

#[test]
fn transform_is_deterministic() {
    let sat = common::smooth_field(&mut common::rng(3), 3, 64);
    let p = PolarParams::new(64, 16, 88);
    let a = polar_transform(&sat, &p, OutOfBounds::Clamp).unwrap();
    let b = polar_transform(&sat, &p, OutOfBounds::Clamp).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn non_square_input_rejected() {
    let sat = RasterImage::filled(3, 64, 48, ValueRange::Unit, 0.5).unwrap();
    assert!(polar_transform(&sat, &PolarParams::new(64, 16, 88), OutOfBounds::Clamp).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_within_input_range(seed in any::<u64>(), n in 8usize..48, h in 2usize..16, w in 4usize..64) {
        let sat = common::smooth_field(&mut common::rng(seed), 3, n);
        let (lo, hi) = sat.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let out = polar_transform(&sat, &PolarParams::new(n, h, w), OutOfBounds::Clamp).unwrap();
        prop_assert_eq!(out.shape(), (3, h, w));
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn source_points_stay_inside_the_inscribed_disc(x in 0.0f64..616.0, y in 0.0f64..112.0) {
        let p = PolarParams::default();
        let (xs, ys) = polar_source_coords(x, y, &p);
        let r = ((xs - 375.0).powi(2) + (ys - 375.0).powi(2)).sqrt();
        prop_assert!(r <= 375.0 * y / 112.0 + 1e-9);
    }
}
