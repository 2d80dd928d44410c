mod common;

use rand::Rng;
use xview::eval::{one_percent_k, psnr, recall_at_k, sharpness_difference, ssim, ssim_window, SSIM_SIGMA};
use xview::{RasterImage, ValueRange};

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> RasterImage {
    let mut r = common::rng(seed);
    let data = (0..c * h * w).map(|_| r.random_range(0.0..1.0)).collect();
    RasterImage::new(c, h, w, ValueRange::Unit, data).unwrap()
}

fn plane(img: &RasterImage, c: usize) -> Vec<f64> {
    img.plane(c).iter().map(|&v| f64::from(v)).collect()
}

#[test]
fn recall_agrees_with_full_sort_oracle() {
    assert_eq!(common::recall_mismatches(31, 50), (0, 0));
}

#[test]
fn recall_is_monotone_in_k() {
    let mut r = common::rng(32);
    for _ in 0..20 {
        let n = r.random_range(2..80);
        let q = common::random_descriptors(&mut r, n, 4, false);
        let g = common::random_descriptors(&mut r, n, 4, false);
        let truth: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let report = recall_at_k(&q, &g, &truth, &ks).unwrap();
        let values: Vec<f64> = report.r_at.values().copied().collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(report.r_at[&n], 1.0);
        assert_eq!(report.one_percent_k, one_percent_k(n));
    }
}

#[test]
fn ssim_matches_windowed_oracle() {
    for (seed, c, h, w) in [(1, 3, 16, 24), (2, 1, 20, 20), (3, 3, 7, 30), (4, 1, 12, 9)] {
        let a = random_image(seed, c, h, w);
        // Correlated with `a` so the structure term is far from zero.
        let field = common::smooth_field(&mut common::rng(seed + 100), c, h.max(w));
        let mut blend = a.clone();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    blend.set(ch, y, x, 0.6 * a.get(ch, y, x) + 0.4 * field.get(ch, y, x));
                }
            }
        }
        let win = ssim_window(h, w);
        let oracle: f64 = (0..c)
            .map(|ch| common::ssim_oracle(&plane(&a, ch), &plane(&blend, ch), h, w, win, SSIM_SIGMA, 1.0))
            .sum::<f64>()
            / c as f64;
        let got = ssim(&a, &blend).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        assert!((got - ssim(&blend, &a).unwrap()).abs() < 1e-9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ssim_of_negation_is_not_positive() {
    let a = common::smooth_field(&mut common::rng(5), 1, 32);
    let neg = RasterImage::new(1, 32, 32, ValueRange::Unit, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!(ssim(&a, &neg).unwrap() <= 0.0);
}

#[test]
fn psnr_matches_mse_oracle() {
    for seed in 0..5 {
        let a = random_image(seed, 3, 9, 13);
        let b = random_image(seed + 50, 3, 9, 13);
        let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| f64::from(x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
        let got = psnr(&a, &b).unwrap();
        assert!((got - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        assert_eq!(got, psnr(&b, &a).unwrap());
    }
    let a = RasterImage::filled(3, 4, 4, ValueRange::Unit, 0.0).unwrap();
    let b = RasterImage::filled(3, 4, 4, ValueRange::Unit, 0.5).unwrap();
    assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

/// `|∂x| + |∂y|` with forward differences over an explicitly zero-padded copy.
fn gradient_oracle(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut padded = vec![vec![0.0; w + 1]; h + 1];
    for y in 0..h {
        for x in 0..w {
            padded[y][x] = p[y * w + x];
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            out.push((padded[y][x + 1] - padded[y][x]).abs() + (padded[y + 1][x] - padded[y][x]).abs());
        }
    }
    out
}

#[test]
fn sharpness_difference_matches_gradient_oracle() {
    for seed in 0..5 {
        let (c, h, w) = (3, 6, 11);
        let a = random_image(seed, c, h, w);
        let b = random_image(seed + 70, c, h, w);
        let mut sum = 0.0;
        for ch in 0..c {
            let ga = gradient_oracle(&plane(&a, ch), h, w);
            let gb = gradient_oracle(&plane(&b, ch), h, w);
            sum += ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
        let oracle = 10.0 * (1.0 / (sum / (c * h * w) as f64)).log10();
        let got = sharpness_difference(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        assert!((got - sharpness_difference(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn sharpness_step_edge_by_hand() {
    // Unit step between columns 1 and 2 on a 4×4 raster, against flat zero.
    let data: Vec<f32> = (0..16).map(|i| if i % 4 >= 2 { 1.0 } else { 0.0 }).collect();
    let a = RasterImage::new(1, 4, 4, ValueRange::Unit, data).unwrap();
    let b = RasterImage::filled(1, 4, 4, ValueRange::Unit, 0.0).unwrap();
    // Per row: column 1 sees the step (1), column 3 sees the border drop (1).
    // The bottom row adds a vertical drop of 1 at columns 2 and 3.
    let mean = (4.0 * 2.0 + 2.0) / 16.0;
    let expected = 10.0 * (1.0f64 / mean).log10();
    assert!((sharpness_difference(&a, &b).unwrap() - expected).abs() < 1e-12);
    assert_eq!(sharpness_difference(&a, &a).unwrap(), f64::INFINITY);
}
