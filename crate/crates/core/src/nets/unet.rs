//! U-shaped encoder/decoder with skip concatenations, used for the single-
//! and multi-frame denoisers and for the registration network.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::rng::rng_from;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels at full resolution; doubles at every level below.
    pub base_width: usize,
    /// Number of 2x down/up-sampling steps.
    pub depth: usize,
    pub leaky_slope: f64,
    /// Zero the final 1x1 convolution so a fresh network outputs zeros.
    pub zero_head: bool,
}

impl UNetSpec {
    /// Spatial dims must be multiples of this; other sizes are reflect-padded.
    pub fn granularity(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// `(out, in, kernel)` of every convolution, in evaluation order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for level in 0..self.depth {
            let w = self.width(level);
            shapes.push((w, cin, 3));
            shapes.push((w, w, 3));
            cin = w;
        }
        let bottom = 2 * cin;
        shapes.push((bottom, cin, 3));
        shapes.push((bottom, bottom, 3));
        let mut cur = bottom;
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            shapes.push((w, cur + w, 3));
            shapes.push((w, w, 3));
            cur = w;
        }
        shapes.push((self.out_channels, cur, 1));
        shapes
    }
}

/// Network parameters stored as `[w0, b0, w1, b1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<F> {
    spec: UNetSpec,
    params: Vec<Tensor<F>>,
}

impl<F: Real> UNet<F> {
    /// Fan-in scaled normal initialization (He init adjusted for the leaky
    /// slope); biases start at zero.
    pub fn new(spec: UNetSpec, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let shapes = spec.conv_shapes();
        let last = shapes.len() - 1;
        let mut params = Vec::with_capacity(2 * shapes.len());
        for (i, &(cout, cin, k)) in shapes.iter().enumerate() {
            let fan_in = (cin * k * k) as f64;
            let shape = [cout, cin, k, k];
            let weight = if i == last && spec.zero_head {
                Tensor::zeros(shape)
            } else {
                let gain = if i == last {
                    1.0
                } else {
                    2.0 / (1.0 + spec.leaky_slope.powi(2))
                };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("valid std");
                let n = cout * cin * k * k;
                Tensor::from_vec(
                    shape,
                    (0..n).map(|_| F::from_f64_lossy(normal.sample(&mut rng))).collect(),
                )
            };
            params.push(weight);
            params.push(Tensor::zeros([cout, 1, 1, 1]));
        }
        UNet { spec, params }
    }

    pub fn from_params(spec: UNetSpec, params: Vec<Tensor<F>>) -> Option<Self> {
        let shapes = spec.conv_shapes();
        if params.len() != 2 * shapes.len() {
            return None;
        }
        for (i, &(cout, cin, k)) in shapes.iter().enumerate() {
            if params[2 * i].shape() != [cout, cin, k, k] || params[2 * i + 1].shape() != [cout, 1, 1, 1] {
                return None;
            }
        }
        Some(UNet { spec, params })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Puts the parameters on the tape as gradient-tracked leaves.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    /// Puts the parameters on the tape without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    pub fn forward(&self, g: &mut Graph<F>, bound: &[Var], x: Var) -> Var {
        assert_eq!(bound.len(), self.params.len(), "bound parameter count");
        let [_, c, h, w] = g.value(x).shape();
        assert_eq!(c, self.spec.in_channels, "unet input channels");
        let m = self.spec.granularity();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let input = if ph > 0 || pw > 0 { g.reflect_pad(x, ph, pw) } else { x };

        let slope = F::from_f64_lossy(self.spec.leaky_slope);
        let mut layer = 0;
        let mut conv_act = |g: &mut Graph<F>, v: Var| {
            let out = g.conv2d(v, bound[2 * layer], Some(bound[2 * layer + 1]));
            layer += 1;
            g.leaky_relu(out, slope)
        };

        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut hcur = input;
        for _ in 0..self.spec.depth {
            hcur = conv_act(g, hcur);
            hcur = conv_act(g, hcur);
            skips.push(hcur);
            hcur = g.max_pool2(hcur);
        }
        hcur = conv_act(g, hcur);
        hcur = conv_act(g, hcur);
        while let Some(skip) = skips.pop() {
            let up = g.upsample2(hcur);
            hcur = g.concat(&[up, skip]);
            hcur = conv_act(g, hcur);
            hcur = conv_act(g, hcur);
        }
        let head = bound.len() / 2 - 1;
        let out = g.conv2d(hcur, bound[2 * head], Some(bound[2 * head + 1]));
        if ph > 0 || pw > 0 {
            g.crop(out, h, w)
        } else {
            out
        }
    }

    pub fn cast<G: Real>(&self) -> UNet<G> {
        UNet {
            spec: self.spec,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }
}
