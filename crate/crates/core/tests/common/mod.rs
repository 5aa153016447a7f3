#![allow(dead_code)]

use d2s::rng::rng_from;
use d2s::tensor::Tensor;
use d2s::Image;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_from(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

pub fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Array2::from_shape_simple_fn((h, w), || rng.random::<f32>())
}

/// Displacements kept away from integer offsets, where bilinear sampling
/// has kinks.
pub fn rand_field(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, max: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, [n, 2, h, w], -max, max);
    for v in t.data_mut() {
        let frac = *v - v.floor();
        if !(0.1..=0.9).contains(&frac) {
            *v = v.floor() + 0.5;
        }
    }
    t
}

#[allow(unused_imports)]
pub use d2s::autodiff::gradcheck::{central_diff, check_leaves, rel_err, sample_coords};
