//! Reverse-mode gradients against central finite differences in double
//! precision on 8x8 inputs.

mod common;

use common::*;
use d2s::autodiff::{Graph, Var};
use d2s::nets::{sample_mask, NetConfig, UNet};
use d2s::pipeline::{build_forward, Ablation, Networks, PassInputs, TrainConfig};
use d2s::tensor::Tensor;
use rand::Rng;

const TOL: f64 = 1e-3;

fn small_net() -> NetConfig {
    NetConfig {
        denoiser_width: 4,
        registration_width: 4,
        depth: 3,
        leaky_slope: 0.1,
    }
}

#[test]
fn warp_gradients() {
    let mut r = rng(1);
    for n in [1, 3] {
        let img = rand_tensor(&mut r, [n, 1, 8, 8], 0.0, 1.0);
        let field = rand_field(&mut r, n, 8, 8, 2.5);
        let probe = rand_tensor(&mut r, [n, 1, 8, 8], 0.0, 1.0);
        let err = check_leaves(&[img, field], 200, |g, v| {
            let out = g.warp(v[0], v[1]);
            let p = g.constant(probe.clone());
            g.weighted_sq_err(out, p, None, 1.0)
        });
        assert!(err < 1e-4, "warp relative error {err}");
    }
}

#[test]
fn warp_gradient_vanishes_where_clamped() {
    // Every sample lies beyond the border, so the field has no influence.
    let mut r = rng(2);
    let img = rand_tensor(&mut r, [1, 1, 8, 8], 0.0, 1.0);
    let field = Tensor::full([1, 2, 8, 8], 20.5);
    let mut g = Graph::new();
    let (i, f) = (g.leaf(img), g.leaf(field));
    let out = g.warp(i, f);
    let zero = g.constant(Tensor::zeros([1, 1, 8, 8]));
    let loss = g.weighted_sq_err(out, zero, None, 1.0);
    let grads = g.backward(loss);
    assert!(grads.get(f).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn smoothness_gradient() {
    let mut r = rng(3);
    let field = rand_tensor(&mut r, [2, 2, 8, 8], -2.0, 2.0);
    let err = check_leaves(&[field], 256, |g, v| g.smoothness(v[0]));
    assert!(err < TOL, "smoothness relative error {err}");
}

fn masked_weights(r: &mut rand_chacha::ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| if r.random::<f64>() < 0.3 { 1.0 } else { 0.0 })
            .collect(),
    )
}

#[test]
fn loss_gradients() {
    let mut r = rng(4);
    // Blind-spot losses: masked squared error against noisy frames.
    let out = rand_tensor(&mut r, [5, 1, 8, 8], 0.0, 1.0);
    let noisy = rand_tensor(&mut r, [5, 1, 8, 8], 0.0, 1.0);
    let w = masked_weights(&mut r, [5, 1, 8, 8]);
    let err = check_leaves(&[out, noisy], 320, |g, v| {
        g.weighted_sq_err(v[0], v[1], Some(w.clone()), 0.037)
    });
    assert!(err < TOL, "masked loss relative error {err}");

    // Registration loss: similarity of warped frames plus weighted smoothness.
    let moving = rand_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    let fixed = rand_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    let field = rand_field(&mut r, 2, 8, 8, 1.5);
    let err = check_leaves(&[moving, fixed, field], 128, |g, v| {
        let warped = g.warp(v[0], v[2]);
        let sim = g.weighted_sq_err(warped, v[1], None, 1.0 / 128.0);
        let smooth = g.smoothness(v[2]);
        g.linear_combination(&[(sim, 1.0), (smooth, 0.1)])
    });
    assert!(err < TOL, "registration loss relative error {err}");
}

fn randomize_zero_tensors<F: d2s::tensor::Real>(net: &mut UNet<F>, seed: u64) {
    let mut r = rng(seed);
    for p in net.params_mut() {
        if p.data().iter().all(|v| *v == F::zero()) {
            for v in p.data_mut() {
                *v = F::from_f64_lossy(r.random_range(-0.3..0.3));
            }
        }
    }
}

fn check_network(mut net: UNet<f64>, h: usize, w: usize, seed: u64) {
    randomize_zero_tensors(&mut net, seed);
    let mut r = rng(seed);
    let cin = net.spec().in_channels;
    let cout = net.spec().out_channels;
    let x = rand_tensor(&mut r, [1, cin, h, w], 0.0, 1.0);
    let probe = rand_tensor(&mut r, [1, cout, h, w], 0.0, 1.0);
    let spec = *net.spec();
    let mut inputs = vec![x];
    inputs.extend(net.params().iter().cloned());
    let err = check_leaves(&inputs, 6, |g, v| {
        let unet = UNet::from_params(spec, v[1..].iter().map(|&p| g.value(p).clone()).collect()).unwrap();
        let out = unet.forward(g, &v[1..], v[0]);
        let p = g.constant(probe.clone());
        g.weighted_sq_err(out, p, None, 1.0)
    });
    assert!(err < TOL, "{spec:?} on {h}x{w}: relative error {err}");
}

#[test]
fn single_frame_denoiser_gradients() {
    let net = small_net();
    check_network(UNet::new(net.denoiser(1), 10), 8, 8, 11);
    // Sizes that need reflect padding.
    check_network(UNet::new(net.denoiser(1), 12), 6, 10, 13);
}

#[test]
fn registration_network_gradients() {
    check_network(UNet::new(small_net().registration(), 20), 8, 8, 21);
}

#[test]
fn multi_frame_denoiser_gradients() {
    let net = small_net();
    check_network(UNet::new(net.denoiser(NetConfig::multi_channels(2)), 30), 8, 8, 31);
}

/// End-to-end: the total training loss with respect to sampled parameters
/// of all three networks.
#[test]
fn pipeline_gradients() {
    let mut r = rng(40);
    let frames: Vec<_> = (0..3).map(|_| rand_image(&mut r, 8, 8)).collect();
    let masks: Vec<_> = (0..3).map(|k| sample_mask((8, 8), 0.3, 100 + k).unwrap()).collect();
    let mask_multi = sample_mask((8, 8), 0.3, 200).unwrap();
    for ablation in [Ablation::Full, Ablation::NoSingle, Ablation::NoRegistration] {
        let cfg = TrainConfig {
            n_aux: 2,
            ablation,
            net: small_net(),
            ..TrainConfig::default()
        };
        let mut nets: Networks<f64> = Networks::new(&cfg.net, 2, 41);
        randomize_zero_tensors(&mut nets.registration.0, 42);
        let inputs = PassInputs {
            frames: &frames,
            masks_single: &masks,
            mask_multi: &mask_multi,
        };
        let params: Vec<Tensor<f64>> = nets.params().cloned().collect();
        let eval = |vals: &[Tensor<f64>]| -> (f64, Option<Vec<Tensor<f64>>>) {
            let mut n = nets.clone();
            for (p, v) in n.params_mut().zip(vals) {
                *p = v.clone();
            }
            let mut g = Graph::new();
            let bound = n.bind(&mut g, true);
            let fwd = build_forward(&mut g, &n, &bound, &inputs, &cfg);
            let loss = g.value(fwd.total).item();
            let mut grads = g.backward(fwd.total);
            let gs = bound
                .all()
                .zip(n.params())
                .map(|(v, p): (Var, _)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            (loss, Some(gs))
        };
        let (_, analytic) = eval(&params);
        let analytic = analytic.unwrap();
        let coords = sample_coords(&params, 3, 43);
        let numeric = central_diff(&params, &coords, 1e-6, &|v| eval(v).0);
        let a: Vec<f64> = coords.iter().map(|&(t, i)| analytic[t].data()[i]).collect();
        let err = rel_err(&a, &numeric);
        assert!(err < TOL, "{ablation:?}: relative error {err}");
        // Every network of the variant receives gradient.
        assert!(a.iter().any(|v| *v != 0.0));
    }
}
