//! Forward and backward kernels for the graph operations. All kernels work
//! on contiguous NCHW buffers.

use crate::tensor::{Real, Tensor};

fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, k: usize, col: &mut [F]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(F::zero());
                    drow[x1..].fill(F::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], c: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    for (d, s) in drow[s0..s0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel and zero padding.
pub fn conv2d<F: Real>(x: &Tensor<F>, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Tensor<F> {
    let [n, c, h, w] = x.shape();
    let [cout, cin, k, k2] = weight.shape();
    assert_eq!(cin, c, "conv2d input channels");
    assert!(k == k2 && k % 2 == 1, "conv2d needs an odd square kernel");
    let hw = h * w;
    let kdim = c * k * k;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![F::zero(); kdim * hw] };
    for b in 0..n {
        let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
        let ob = &mut out.data_mut()[b * cout * hw..(b + 1) * cout * hw];
        if let Some(bias) = bias {
            for (o, bv) in ob.chunks_mut(hw).zip(bias.data()) {
                o.fill(*bv);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        let rhs: &[F] = if k == 1 {
            xb
        } else {
            im2col(xb, c, h, w, k, &mut col);
            &col
        };
        F::gemm(
            cout,
            kdim,
            hw,
            F::one(),
            (weight.data(), kdim as isize, 1),
            (rhs, hw as isize, 1),
            beta,
            (ob, hw as isize, 1),
        );
    }
    out
}

pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    need_input: bool,
) -> ConvGrads<F> {
    let [n, c, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let hw = h * w;
    let kdim = c * k * k;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![F::zero(); kdim * hw];
    for b in 0..n {
        let gob = &grad_out.data()[b * cout * hw..(b + 1) * cout * hw];
        for (acc, plane) in gb.data_mut().iter_mut().zip(gob.chunks(hw)) {
            *acc += plane.iter().copied().sum::<F>();
        }
        let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
        let cols: &[F] = if k == 1 {
            xb
        } else {
            im2col(xb, c, h, w, k, &mut col);
            &col
        };
        // dW += dY * col^T
        F::gemm(
            cout,
            hw,
            kdim,
            F::one(),
            (gob, hw as isize, 1),
            (cols, 1, hw as isize),
            F::one(),
            (gw.data_mut(), kdim as isize, 1),
        );
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx.data_mut()[b * c * hw..(b + 1) * c * hw];
            if k == 1 {
                F::gemm(
                    kdim,
                    cout,
                    hw,
                    F::one(),
                    (weight.data(), 1, kdim as isize),
                    (gob, hw as isize, 1),
                    F::one(),
                    (gxb, hw as isize, 1),
                );
            } else {
                F::gemm(
                    kdim,
                    cout,
                    hw,
                    F::one(),
                    (weight.data(), 1, kdim as isize),
                    (gob, hw as isize, 1),
                    F::zero(),
                    (&mut col, hw as isize, 1),
                );
                col2im(&col, c, h, w, k, gxb);
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb.reshaped([cout, 1, 1, 1]),
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the winning input element.
pub fn max_pool2<F: Real>(x: &Tensor<F>) -> (Tensor<F>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(out.numel());
    let xd = x.data();
    for (p, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + 2 * oy * w + 2 * ox;
                let mut best = i00;
                for cand in [i00 + 1, i00 + w, i00 + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                o[oy * ow + ox] = xd[best];
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<F: Real>(shape: [usize; 4], arg: &[u32], grad_out: &Tensor<F>) -> Tensor<F> {
    let mut g = Tensor::zeros(shape);
    let gd = g.data_mut();
    for (idx, go) in arg.iter().zip(grad_out.data()) {
        gd[*idx as usize] += *go;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (oh, ow) = (2 * h, 2 * w);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(shape: [usize; 4], grad_out: &Tensor<F>) -> Tensor<F> {
    let [_, _, h, w] = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut g = Tensor::zeros(shape);
    for (dst, src) in g.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    g
}

/// Source coordinate along one axis after clamping to the border, split
/// into (lower index, upper index, fractional weight, d(clamped)/d(raw)).
#[inline]
fn axis_sample<F: Real>(raw: F, len: usize) -> (usize, usize, F, F) {
    let hi = F::from_usize(len - 1).unwrap();
    let (pos, slope) = if raw.is_nan() || raw < F::zero() {
        (F::zero(), F::zero())
    } else if raw > hi {
        (hi, F::zero())
    } else {
        (raw, F::one())
    };
    let lo = pos.floor();
    let i0 = lo.to_usize().unwrap().min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - lo, slope)
}

/// Bilinear resampling of `img` (n, c, h, w) at `(i + dy, j + dx)` where the
/// displacement `field` is (n, 2, h, w) with channel 0 = dy, 1 = dx.
/// Coordinates outside the grid are clamped to the border.
pub fn warp<F: Real>(img: &Tensor<F>, field: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = img.shape();
    assert_eq!(field.shape(), [n, 2, h, w], "warp field shape");
    let hw = h * w;
    let mut out = Tensor::zeros(img.shape());
    let (id, fd) = (img.data(), field.data());
    let od = out.data_mut();
    for b in 0..n {
        let fy = &fd[(2 * b) * hw..(2 * b + 1) * hw];
        let fx = &fd[(2 * b + 1) * hw..(2 * b + 2) * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (y0, y1, wy, _) = axis_sample(F::from_usize(i).unwrap() + fy[p], h);
                let (x0, x1, wx, _) = axis_sample(F::from_usize(j).unwrap() + fx[p], w);
                let one = F::one();
                let (w00, w01, w10, w11) = ((one - wy) * (one - wx), (one - wy) * wx, wy * (one - wx), wy * wx);
                for ch in 0..c {
                    let plane = &id[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    od[(b * c + ch) * hw + p] = w00 * plane[y0 * w + x0]
                        + w01 * plane[y0 * w + x1]
                        + w10 * plane[y1 * w + x0]
                        + w11 * plane[y1 * w + x1];
                }
            }
        }
    }
    out
}

pub fn warp_backward<F: Real>(
    img: &Tensor<F>,
    field: &Tensor<F>,
    grad_out: &Tensor<F>,
    need_img: bool,
    need_field: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let [n, c, h, w] = img.shape();
    let hw = h * w;
    let mut gi = need_img.then(|| Tensor::zeros(img.shape()));
    let mut gf = need_field.then(|| Tensor::zeros(field.shape()));
    let (id, fd, gd) = (img.data(), field.data(), grad_out.data());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let fy = fd[(2 * b) * hw + p];
                let fx = fd[(2 * b + 1) * hw + p];
                let (y0, y1, wy, sy) = axis_sample(F::from_usize(i).unwrap() + fy, h);
                let (x0, x1, wx, sx) = axis_sample(F::from_usize(j).unwrap() + fx, w);
                let one = F::one();
                let (w00, w01, w10, w11) = ((one - wy) * (one - wx), (one - wy) * wx, wy * (one - wx), wy * wx);
                let mut dfy = F::zero();
                let mut dfx = F::zero();
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let g = gd[off + p];
                    if g == F::zero() {
                        continue;
                    }
                    if let Some(gi) = gi.as_mut() {
                        let gp = &mut gi.data_mut()[off..off + hw];
                        gp[y0 * w + x0] += g * w00;
                        gp[y0 * w + x1] += g * w01;
                        gp[y1 * w + x0] += g * w10;
                        gp[y1 * w + x1] += g * w11;
                    }
                    if gf.is_some() {
                        let plane = &id[off..off + hw];
                        let (v00, v01, v10, v11) = (
                            plane[y0 * w + x0],
                            plane[y0 * w + x1],
                            plane[y1 * w + x0],
                            plane[y1 * w + x1],
                        );
                        dfy += g * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                        dfx += g * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
                    }
                }
                if let Some(gf) = gf.as_mut() {
                    let gfd = gf.data_mut();
                    gfd[(2 * b) * hw + p] += dfy * sy;
                    gfd[(2 * b + 1) * hw + p] += dfx * sx;
                }
            }
        }
    }
    (gi, gf)
}

/// Mean over batch of `sum(forward differences^2) / (2 h w)` for a
/// (n, 2, h, w) displacement field. Differences past the last row/column
/// are taken as zero.
pub fn smoothness<F: Real>(field: &Tensor<F>) -> F {
    let [n, c, h, w] = field.shape();
    let mut total = F::zero();
    for plane in field.data().chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                if i + 1 < h {
                    let d = plane[(i + 1) * w + j] - v;
                    total += d * d;
                }
                if j + 1 < w {
                    let d = plane[i * w + j + 1] - v;
                    total += d * d;
                }
            }
        }
    }
    total / F::from_usize(n * c * h * w).unwrap()
}

pub fn smoothness_backward<F: Real>(field: &Tensor<F>, grad_out: F) -> Tensor<F> {
    let [n, c, h, w] = field.shape();
    let scale = F::from_f64_lossy(2.0) * grad_out / F::from_usize(n * c * h * w).unwrap();
    let mut g = Tensor::zeros(field.shape());
    for (plane, gp) in field.data().chunks(h * w).zip(g.data_mut().chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                if i + 1 < h {
                    let d = scale * (plane[(i + 1) * w + j] - v);
                    gp[(i + 1) * w + j] += d;
                    gp[i * w + j] -= d;
                }
                if j + 1 < w {
                    let d = scale * (plane[i * w + j + 1] - v);
                    gp[i * w + j + 1] += d;
                    gp[i * w + j] -= d;
                }
            }
        }
    }
    g
}

#[inline]
fn reflect(idx: usize, len: usize) -> usize {
    if idx < len {
        idx
    } else {
        2 * (len - 1) - idx
    }
}

/// Reflect-pads the bottom and right edges (edge pixel not repeated).
pub fn reflect_pad<F: Real>(x: &Tensor<F>, ph: usize, pw: usize) -> Tensor<F> {
    let [n, c, h, w] = x.shape();
    assert!(ph < h && pw < w, "reflect padding must be smaller than the image");
    let (oh, ow) = (h + ph, w + pw);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..oh {
            let sy = reflect(y, h);
            for xx in 0..ow {
                dst[y * ow + xx] = src[sy * w + reflect(xx, w)];
            }
        }
    }
    out
}

pub fn reflect_pad_backward<F: Real>(shape: [usize; 4], grad_out: &Tensor<F>) -> Tensor<F> {
    let [_, _, h, w] = shape;
    let [_, _, oh, ow] = grad_out.shape();
    let mut g = Tensor::zeros(shape);
    for (dst, src) in g.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..oh {
            let sy = reflect(y, h);
            for xx in 0..ow {
                dst[sy * w + reflect(xx, w)] += src[y * ow + xx];
            }
        }
    }
    g
}

/// Top-left `h x w` window.
pub fn crop<F: Real>(x: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let [n, c, ih, iw] = x.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for (src, dst) in x.data().chunks(ih * iw).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[y * iw..y * iw + w]);
        }
    }
    out
}

pub fn crop_backward<F: Real>(shape: [usize; 4], grad_out: &Tensor<F>) -> Tensor<F> {
    let [_, _, ih, iw] = shape;
    let [_, _, h, w] = grad_out.shape();
    let mut g = Tensor::zeros(shape);
    for (dst, src) in g.data_mut().chunks_mut(ih * iw).zip(grad_out.data().chunks(h * w)) {
        for y in 0..h {
            dst[y * iw..y * iw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    g
}
