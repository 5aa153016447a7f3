//! A small tape-based reverse-mode differentiation engine over [`Tensor`].
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! visits every node after all of its consumers.

pub mod gradcheck;
pub mod kernels;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    SliceBatch {
        x: Var,
        start: usize,
    },
    RepeatBatch {
        x: Var,
        times: usize,
    },
    Warp {
        img: Var,
        field: Var,
    },
    MulConst {
        x: Var,
        factor: Tensor<F>,
    },
    WeightedSqErr {
        a: Var,
        b: Var,
        weights: Option<Tensor<F>>,
        scale: F,
    },
    Smoothness {
        field: Var,
    },
    LinearCombination {
        terms: Vec<(Var, F)>,
    },
    ReflectPad {
        x: Var,
    },
    Crop {
        x: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A tensor whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(weight), bias.map(|b| self.value(b)));
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(out, Op::Conv2d { x, weight, bias }, &inputs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = kernels::max_pool2(self.value(x));
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        self.push(out, Op::Upsample2 { x }, &[x])
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let [n, _, h, w] = self.value(parts[0]).shape();
        let total_c: usize = parts
            .iter()
            .map(|p| {
                let [pn, pc, ph, pw] = self.value(*p).shape();
                assert_eq!((pn, ph, pw), (n, h, w), "concat shapes");
                pc
            })
            .sum();
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let sz = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[b * sz..(b + 1) * sz]);
            }
        }
        let out = Tensor::from_vec([n, total_c, h, w], data);
        self.push(out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape { x }, &[x])
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        assert!(start + len <= n, "batch slice out of range");
        let sz = c * h * w;
        let out = Tensor::from_vec([len, c, h, w], t.data()[start * sz..(start + len) * sz].to_vec());
        self.push(out, Op::SliceBatch { x, start }, &[x])
    }

    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let mut data = Vec::with_capacity(times * t.numel());
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec([n * times, c, h, w], data);
        self.push(out, Op::RepeatBatch { x, times }, &[x])
    }

    pub fn warp(&mut self, img: Var, field: Var) -> Var {
        let out = kernels::warp(self.value(img), self.value(field));
        self.push(out, Op::Warp { img, field }, &[img, field])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<F>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), factor.shape(), "mul_const shape");
        let data = t.data().iter().zip(factor.data()).map(|(a, b)| *a * *b).collect();
        let out = Tensor::from_vec(t.shape(), data);
        self.push(out, Op::MulConst { x, factor }, &[x])
    }

    /// `scale * sum(weights * (a - b)^2)` as a scalar.
    pub fn weighted_sq_err(&mut self, a: Var, b: Var, weights: Option<Tensor<F>>, scale: F) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "weighted_sq_err shape");
        let sum: F = match &weights {
            Some(wt) => {
                assert_eq!(wt.shape(), ta.shape(), "weights shape");
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .zip(wt.data())
                    .map(|((x, y), w)| *w * (*x - *y) * (*x - *y))
                    .sum()
            }
            None => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| (*x - *y) * (*x - *y))
                .sum(),
        };
        let out = Tensor::scalar(scale * sum);
        self.push(out, Op::WeightedSqErr { a, b, weights, scale }, &[a, b])
    }

    pub fn smoothness(&mut self, field: Var) -> Var {
        let out = Tensor::scalar(kernels::smoothness(self.value(field)));
        self.push(out, Op::Smoothness { field }, &[field])
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, F)]) -> Var {
        let total = terms.iter().map(|(v, c)| *c * self.value(*v).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(total),
            Op::LinearCombination { terms: terms.to_vec() },
            &inputs,
        )
    }

    pub fn reflect_pad(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let out = kernels::reflect_pad(self.value(x), ph, pw);
        self.push(out, Op::ReflectPad { x }, &[x])
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = kernels::crop(self.value(x), h, w);
        self.push(out, Op::Crop { x }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let mut acc = |v: Var, t: Tensor<F>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Conv2d { x, weight, bias } => {
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*weight), g, self.wants(*x));
                if let Some(gx) = cg.input {
                    acc(*x, gx);
                }
                if self.wants(*weight) {
                    acc(*weight, cg.weight);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let shape = self.value(*b).shape();
                        acc(*b, cg.bias.reshaped(shape));
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > F::zero() { *gv } else { *gv * *slope })
                    .collect();
                acc(*x, Tensor::from_vec(xv.shape(), data));
            }
            Op::MaxPool2 { x, argmax } => {
                acc(*x, kernels::max_pool2_backward(self.value(*x).shape(), argmax, g));
            }
            Op::Upsample2 { x } => acc(*x, kernels::upsample2_backward(self.value(*x).shape(), g)),
            Op::Concat { parts } => {
                let [n, total_c, h, w] = g.shape();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(n * pc * h * w);
                        for b in 0..n {
                            let start = (b * total_c + offset) * h * w;
                            data.extend_from_slice(&g.data()[start..start + pc * h * w]);
                        }
                        acc(*p, Tensor::from_vec([n, pc, h, w], data));
                    }
                    offset += pc;
                }
            }
            Op::Reshape { x } => acc(*x, g.clone().reshaped(self.value(*x).shape())),
            Op::SliceBatch { x, start } => {
                let shape = self.value(*x).shape();
                let mut full = Tensor::zeros(shape);
                let sz = shape[1] * shape[2] * shape[3];
                full.data_mut()[start * sz..start * sz + g.numel()].copy_from_slice(g.data());
                acc(*x, full);
            }
            Op::RepeatBatch { x, times } => {
                let shape = self.value(*x).shape();
                let mut sum = Tensor::zeros(shape);
                let sz = sum.numel();
                for r in 0..*times {
                    for (s, v) in sum.data_mut().iter_mut().zip(&g.data()[r * sz..(r + 1) * sz]) {
                        *s += *v;
                    }
                }
                acc(*x, sum);
            }
            Op::Warp { img, field } => {
                let (gi, gf) = kernels::warp_backward(
                    self.value(*img),
                    self.value(*field),
                    g,
                    self.wants(*img),
                    self.wants(*field),
                );
                if let Some(gi) = gi {
                    acc(*img, gi);
                }
                if let Some(gf) = gf {
                    acc(*field, gf);
                }
            }
            Op::MulConst { x, factor } => {
                let data = g.data().iter().zip(factor.data()).map(|(a, b)| *a * *b).collect();
                acc(*x, Tensor::from_vec(g.shape(), data));
            }
            Op::WeightedSqErr { a, b, weights, scale } => {
                let two = F::from_f64_lossy(2.0) * *scale * g.item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                let data: Vec<F> = match weights {
                    Some(wt) => ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .zip(wt.data())
                        .map(|((x, y), w)| two * *w * (*x - *y))
                        .collect(),
                    None => ta.data().iter().zip(tb.data()).map(|(x, y)| two * (*x - *y)).collect(),
                };
                let da = Tensor::from_vec(ta.shape(), data);
                if self.wants(*b) {
                    acc(*b, da.map(|v| -v));
                }
                if self.wants(*a) {
                    acc(*a, da);
                }
            }
            Op::Smoothness { field } => {
                acc(*field, kernels::smoothness_backward(self.value(*field), g.item()));
            }
            Op::LinearCombination { terms } => {
                for (v, c) in terms {
                    if self.wants(*v) {
                        acc(*v, Tensor::scalar(*c * g.item()));
                    }
                }
            }
            Op::ReflectPad { x } => acc(*x, kernels::reflect_pad_backward(self.value(*x).shape(), g)),
            Op::Crop { x } => acc(*x, kernels::crop_backward(self.value(*x).shape(), g)),
        }
    }
}
