//! Finite-difference checking of tape gradients.

use rand::Rng;

use super::{Graph, Var};
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `loss` at `(tensor, index)` coordinates.
pub fn central_diff(
    values: &[Tensor<f64>],
    coords: &[(usize, usize)],
    step: f64,
    loss: &dyn Fn(&[Tensor<f64>]) -> f64,
) -> Vec<f64> {
    let mut work = values.to_vec();
    coords
        .iter()
        .map(|&(t, i)| {
            let x = work[t].data()[i];
            work[t].data_mut()[i] = x + step;
            let up = loss(&work);
            work[t].data_mut()[i] = x - step;
            let down = loss(&work);
            work[t].data_mut()[i] = x;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Every coordinate of small tensors, `per_tensor` random ones of larger.
pub fn sample_coords(values: &[Tensor<f64>], per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = rng_from(seed);
    let mut coords = Vec::new();
    for (t, v) in values.iter().enumerate() {
        if v.numel() <= per_tensor {
            coords.extend((0..v.numel()).map(|i| (t, i)));
        } else {
            coords.extend((0..per_tensor).map(|_| (t, rng.random_range(0..v.numel()))));
        }
    }
    coords
}

/// Relative error between the reverse-mode gradient of the scalar built by
/// `build` and central differences, over sampled coordinates of `inputs`
/// (all placed on the tape as leaves).
pub fn check_leaves(inputs: &[Tensor<f64>], per_tensor: usize, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |vals: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let coords = sample_coords(inputs, per_tensor, 17);
    let numeric = central_diff(inputs, &coords, 1e-6, &eval);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(t, i)| grads.get(vars[t]).map_or(0.0, |g| g.data()[i]))
        .collect();
    rel_err(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]);
        let err = check_leaves(&[x], 3, |g, v| {
            let zero = g.constant(Tensor::zeros([1, 1, 1, 3]));
            g.weighted_sq_err(v[0], zero, None, 1.5)
        });
        assert!(err < 1e-8);
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
        assert!((rel_err(&[1.0], &[2.0]) - 0.5).abs() < 1e-12);
    }
}
