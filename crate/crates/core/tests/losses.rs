//! Losses against plain loop evaluations, and the training graph against
//! the image-level loss functions.

mod common;

use common::*;
use d2s::autodiff::Graph;
use d2s::nets::{sample_mask, smoothness_penalty, BlindSpotMask, DeformationField};
use d2s::pipeline::{
    build_forward, loss_multi, loss_registration, loss_single, total_loss, Ablation, Networks, PassInputs, TrainConfig,
};
use d2s::tensor::Tensor;
use d2s::Image;
use ndarray::Array2;
use rand::Rng;

fn brute_masked(est: &Image, y: &Image, b: &BlindSpotMask) -> f64 {
    let (h, w) = est.dim();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if b.mask()[[i, j]] == 0.0 {
                let d = est[[i, j]] as f64 - y[[i, j]] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn brute_smoothness(u: &DeformationField) -> f64 {
    let (h, w) = u.dim();
    let mut sum = 0.0;
    for c in [&u.dy, &u.dx] {
        for i in 0..h {
            for j in 0..w {
                let v = c[[i, j]] as f64;
                if i + 1 < h {
                    sum += (c[[i + 1, j]] as f64 - v).powi(2);
                }
                if j + 1 < w {
                    sum += (c[[i, j + 1]] as f64 - v).powi(2);
                }
            }
        }
    }
    sum / (2 * h * w) as f64
}

fn rand_def(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize) -> DeformationField {
    let mut f = || Array2::from_shape_simple_fn((h, w), || r.random_range(-2.0f32..2.0));
    let dy = f();
    DeformationField { dy, dx: f() }
}

#[test]
fn losses_match_brute_force_loops() {
    let mut r = rng(7);
    for case in 0..20u64 {
        let n = 1 + case as usize % 4;
        let outputs: Vec<Image> = (0..=n).map(|_| rand_image(&mut r, 8, 8)).collect();
        let noisy: Vec<Image> = (0..=n).map(|_| rand_image(&mut r, 8, 8)).collect();
        let masks: Vec<BlindSpotMask> = (0..=n)
            .map(|k| sample_mask((8, 8), 0.3, 50 * case + k as u64).unwrap())
            .collect();
        let expected = masks
            .iter()
            .enumerate()
            .map(|(k, b)| brute_masked(&outputs[k], &noisy[k], b))
            .sum::<f64>()
            / (n + 1) as f64;
        assert!((loss_single(&outputs, &noisy, &masks).unwrap() - expected).abs() < 1e-6);

        let b = sample_mask((8, 8), 0.3, 999 + case).unwrap();
        let lm = loss_multi(&outputs[0], &noisy[0], &b).unwrap();
        assert!((lm - brute_masked(&outputs[0], &noisy[0], &b)).abs() < 1e-6);

        let fields: Vec<DeformationField> = (0..n).map(|_| rand_def(&mut r, 8, 8)).collect();
        let lambda = 0.1;
        let mut expected = 0.0;
        for k in 0..n {
            let mut mse = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    mse += (outputs[k + 1][[i, j]] as f64 - outputs[0][[i, j]] as f64).powi(2);
                }
            }
            expected += mse / 64.0 + lambda * brute_smoothness(&fields[k]);
        }
        expected /= n as f64;
        let lr = loss_registration(&outputs[1..], &outputs[0], &fields, lambda).unwrap();
        assert!((lr - expected).abs() < 1e-6, "{lr} vs {expected}");

        for u in &fields {
            assert!((smoothness_penalty(u) - brute_smoothness(u)).abs() < 1e-6);
        }
    }
}

#[test]
fn hand_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg), 6.0);
    assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
    let off = TrainConfig {
        lambda_s: 0.0,
        lambda_r: 0.0,
        ..cfg
    };
    assert_eq!(total_loss(5.0, 7.0, 3.0, &off), 3.0);

    // dy = a * j: every column difference is a, row differences vanish.
    let a = 0.3f32;
    let dy = Array2::from_shape_fn((16, 16), |(_, j)| a * j as f32);
    let u = DeformationField::new(dy, Array2::zeros((16, 16))).unwrap();
    let expected = (a as f64).powi(2) * (16.0 * 15.0) / (2.0 * 256.0);
    assert!((smoothness_penalty(&u) - expected).abs() < 1e-7);
    assert!((expected - (a as f64).powi(2) / 2.0).abs() < 0.02);
}

/// The scalar losses recorded during training equal the image-level loss
/// functions evaluated on the intermediate images of the same pass.
#[test]
fn training_graph_matches_loss_functions() {
    let mut r = rng(8);
    for ablation in [Ablation::Full, Ablation::NoSingle, Ablation::NoRegistration] {
        let cfg = TrainConfig {
            n_aux: 2,
            ablation,
            net: d2s::nets::NetConfig {
                denoiser_width: 4,
                registration_width: 4,
                depth: 3,
                leaky_slope: 0.1,
            },
            ..TrainConfig::default()
        };
        let nets: Networks<f64> = Networks::new(&cfg.net, 2, 3);
        let frames: Vec<Image> = (0..3).map(|_| rand_image(&mut r, 8, 8)).collect();
        let masks: Vec<BlindSpotMask> = (0..3).map(|k| sample_mask((8, 8), 0.3, 70 + k).unwrap()).collect();
        let mask_multi = sample_mask((8, 8), 0.3, 80).unwrap();
        let inputs = PassInputs {
            frames: &frames,
            masks_single: &masks,
            mask_multi: &mask_multi,
        };
        let mut g = Graph::new();
        let bound = nets.bind(&mut g, false);
        let fwd = build_forward(&mut g, &nets, &bound, &inputs, &cfg);
        let planes = |t: &Tensor<f64>| -> Vec<Image> { (0..t.shape()[0]).map(|n| t.plane(n, 0)).collect() };
        let item = |v: Option<d2s::autodiff::Var>| v.map(|v| g.value(v).item());

        let lm = loss_multi(&g.value(fwd.estimate).plane(0, 0), &frames[0], &mask_multi).unwrap();
        assert!((g.value(fwd.loss_multi).item() - lm).abs() < 1e-6);

        let (ls, lr) = (item(fwd.loss_single), item(fwd.loss_registration));
        match ablation {
            Ablation::NoSingle => assert!(ls.is_none() && fwd.denoised.is_none()),
            _ => {
                let out = planes(g.value(fwd.denoised.unwrap()));
                assert!((ls.unwrap() - loss_single(&out, &frames, &masks).unwrap()).abs() < 1e-6);
            }
        }
        match ablation {
            Ablation::NoRegistration => assert!(lr.is_none() && fwd.fields.is_none()),
            _ => {
                let fields_t = g.value(fwd.fields.unwrap());
                let fields: Vec<DeformationField> =
                    (0..2).map(|n| DeformationField::from_tensor(fields_t, n)).collect();
                let aligned = planes(g.value(fwd.aligned.unwrap()));
                let fixed = match fwd.denoised {
                    Some(d) => g.value(d).plane(0, 0),
                    None => frames[0].clone(),
                };
                let expected = loss_registration(&aligned, &fixed, &fields, cfg.lambda_smooth).unwrap();
                assert!((lr.unwrap() - expected).abs() < 1e-6);
            }
        }
        let total = total_loss(
            ls.unwrap_or(0.0),
            lr.unwrap_or(0.0),
            g.value(fwd.loss_multi).item(),
            &cfg,
        );
        assert!((g.value(fwd.total).item() - total).abs() < 1e-9);
    }
}

/// The gradient of the multi-frame loss with respect to the estimate
/// vanishes on every pixel the mask keeps.
#[test]
fn blind_spot_soundness() {
    let mut r = rng(9);
    for k in 0..10u64 {
        let b = sample_mask((8, 8), 0.3, 300 + k).unwrap();
        let est = rand_tensor(&mut r, [1, 1, 8, 8], 0.0, 1.0);
        let y: Image = rand_image(&mut r, 8, 8);
        let mut g = Graph::new();
        let e = g.leaf(est);
        let yv = g.constant(Tensor::from_image(&y));
        let loss = g.weighted_sq_err(e, yv, Some(Tensor::from_image(&b.loss_weights())), 1.0);
        let grads = g.backward(loss);
        let grad = grads.get(e).unwrap().plane(0, 0);
        for ((i, j), v) in grad.indexed_iter() {
            if b.mask()[[i, j]] == 1.0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_ne!(*v, 0.0);
            }
        }
    }
}
