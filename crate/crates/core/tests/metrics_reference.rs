//! SSIM and PSNR against a direct windowed implementation and against
//! values computed with scikit-image 0.25 (`structural_similarity` with
//! `gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
//! data_range=1`).

mod common;

use common::*;
use d2s::metrics::{masked_metrics, psnr, ssim};
use d2s::Image;
use ndarray::Array2;

/// Mean SSIM over all fully contained 11x11 windows, each evaluated from
/// scratch with an explicitly built Gaussian kernel.
fn reference_ssim(x: &Image, y: &Image) -> f64 {
    let clip = |v: f32| (v as f64).clamp(0.0, 1.0);
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, k) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            *k = (-(da * da + db * db) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = x.dim();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..11 {
                for b in 0..11 {
                    let k = kernel[a][b] / total;
                    let (u, v) = (clip(x[[i + a, j + b]]), clip(y[[i + a, j + b]]));
                    mx += k * u;
                    my += k * v;
                    xx += k * u * u;
                    yy += k * v * v;
                    xy += k * u * v;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_direct_windowed_computation() {
    let mut r = rng(11);
    for case in 0..20 {
        let (h, w) = (12 + case % 5 * 7, 11 + case % 3 * 9);
        let x = rand_image(&mut r, h, w);
        let noise = rand_image(&mut r, h, w);
        let y = Array2::from_shape_fn((h, w), |(i, j)| x[[i, j]] + 0.4 * (noise[[i, j]] - 0.5));
        let got = ssim(&x, &y).unwrap();
        let want = reference_ssim(&x, &y);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

fn pattern(h: usize, w: usize, a: f64, b: f64, c: f64) -> Image {
    Array2::from_shape_fn((h, w), |(i, j)| {
        (0.5 + 0.4 * (i as f64 * a).sin() * (j as f64 * b + c).cos()) as f32
    })
}

#[test]
fn ssim_matches_scikit_image() {
    let cases = [
        (32, 32, 0.3, 0.2, 0.3, 0.7, 0.5, 0.1, 0.7950453035684732),
        (24, 40, 0.11, 0.23, 1.0, 0.9, 0.13, 0.25, 0.32496524236354174),
        (16, 16, 0.5, 0.45, 0.0, 1.7, 0.3, 0.05, 0.976119878556819),
        (48, 20, 0.07, 0.6, 2.0, 0.2, 1.1, 0.4, 0.28696396198851615),
    ];
    for (h, w, a, b, c, p, q, amp, expected) in cases {
        let x = pattern(h, w, a, b, c);
        let y = Array2::from_shape_fn((h, w), |(i, j)| {
            (x[[i, j]] as f64 + amp * (p * i as f64 + q * j as f64).cos()) as f32
        });
        let got = ssim(&x, &y).unwrap();
        assert!((got - expected).abs() < 1e-4, "{h}x{w}: {got} vs {expected}");
    }
}

#[test]
fn roi_metrics_match_pixel_loops() {
    let mut r = rng(12);
    for _ in 0..10 {
        let x = rand_image(&mut r, 20, 24);
        let y = rand_image(&mut r, 20, 24);
        let roi = Array2::from_shape_fn((20, 24), |(i, j)| (i * 7 + j * 3) % 5 < 2);
        let (mut sum, mut n) = (0.0, 0);
        for ((i, j), inside) in roi.indexed_iter() {
            if *inside {
                sum += (x[[i, j]] as f64 - y[[i, j]] as f64).powi(2);
                n += 1;
            }
        }
        let expected = 10.0 * (1.0 / (sum / n as f64)).log10();
        let (p, _) = masked_metrics(&x, &y, &roi).unwrap();
        assert!((p - expected).abs() < 1e-9);

        let full = Array2::from_elem((20, 24), true);
        assert_eq!(
            masked_metrics(&x, &y, &full).unwrap(),
            (psnr(&x, &y, 1.0).unwrap(), ssim(&x, &y).unwrap())
        );
    }
    let x = rand_image(&mut r, 16, 16);
    let mut y = x.clone();
    y[[0, 0]] += 0.5;
    let mut roi = Array2::from_elem((16, 16), true);
    roi[[0, 0]] = false;
    assert_eq!(masked_metrics(&x, &y, &roi).unwrap().0, f64::INFINITY);
    assert!(masked_metrics(&x, &y, &Array2::from_elem((16, 16), false)).is_err());
}
