//! Blind-spot masks, deformation fields, the differentiable warp and the
//! three learnable networks (single-frame denoiser, registration network,
//! multi-frame denoiser).

pub mod unet;

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Real, Tensor};
use crate::Image;

pub use unet::{UNet, UNetSpec};

/// Binary dropout mask: 1 keeps a pixel visible to the network, 0 hides it
/// and makes it a supervised pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotMask {
    mask: Array2<f32>,
    rate: f64,
}

impl BlindSpotMask {
    pub fn mask(&self) -> &Array2<f32> {
        &self.mask
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn dropped(&self) -> usize {
        self.mask.iter().filter(|v| **v == 0.0).count()
    }

    /// Builds a mask from explicit 0/1 entries.
    pub fn from_array(mask: Array2<f32>, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        if mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(BlindSpotMask { mask, rate })
    }

    /// Multiplicative factor `b / (1 - rate)` (inverted dropout).
    pub fn keep_factor(&self) -> Image {
        let scale = (1.0 / (1.0 - self.rate)) as f32;
        self.mask.mapv(|b| b * scale)
    }

    /// Per-pixel loss weights `(1 - b) / #dropped`; all zero when nothing
    /// was dropped.
    pub fn loss_weights(&self) -> Image {
        let dropped = self.dropped();
        if dropped == 0 {
            return Array2::zeros(self.mask.dim());
        }
        let w = 1.0 / dropped as f64;
        self.mask.mapv(|b| ((1.0 - b as f64) * w) as f32)
    }

    /// Rotates the mask by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rotated(&self, quarter_turns: usize) -> Self {
        BlindSpotMask {
            mask: rot90(&self.mask, quarter_turns),
            rate: self.rate,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// I.i.d. Bernoulli(1 - rate) mask, deterministic in `seed`.
pub fn sample_mask(shape: (usize, usize), rate: f64, seed: u64) -> Result<BlindSpotMask> {
    check_rate(rate)?;
    let mut rng = rng_from(seed);
    let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { 1.0 });
    Ok(BlindSpotMask { mask, rate })
}

/// `b * y / (1 - rate)`.
pub fn apply_blind_spot(y: &Image, b: &BlindSpotMask) -> Result<Image> {
    if y.dim() != b.dim() {
        return Err(Error::shape(format!("image {:?} vs mask {:?}", y.dim(), b.dim())));
    }
    let scale = (1.0 / (1.0 - b.rate)) as f32;
    Ok(Zip::from(y).and(&b.mask).map_collect(|v, m| v * m * scale))
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
pub fn rot90<T: Clone>(img: &Array2<T>, quarter_turns: usize) -> Array2<T> {
    let (h, w) = img.dim();
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => Array2::from_shape_fn((w, h), |(i, j)| img[[j, w - 1 - i]].clone()),
        2 => Array2::from_shape_fn((h, w), |(i, j)| img[[h - 1 - i, w - 1 - j]].clone()),
        _ => Array2::from_shape_fn((w, h), |(i, j)| img[[h - 1 - j, i]].clone()),
    }
}

/// Dense displacement `(dy, dx)` in pixels on the target grid: target pixel
/// `(i, j)` corresponds to source location `(i + dy, j + dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub dy: Image,
    pub dx: Image,
}

impl DeformationField {
    pub fn zeros(shape: (usize, usize)) -> Self {
        DeformationField {
            dy: Array2::zeros(shape),
            dx: Array2::zeros(shape),
        }
    }

    pub fn constant(shape: (usize, usize), dy: f32, dx: f32) -> Self {
        DeformationField {
            dy: Array2::from_elem(shape, dy),
            dx: Array2::from_elem(shape, dx),
        }
    }

    pub fn new(dy: Image, dx: Image) -> Result<Self> {
        if dy.dim() != dx.dim() {
            return Err(Error::shape(format!("dy {:?} vs dx {:?}", dy.dim(), dx.dim())));
        }
        Ok(DeformationField { dy, dx })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dy.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.dy.iter().chain(self.dx.iter()).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.dy.iter().chain(self.dx.iter()).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// As a `(1, 2, h, w)` tensor.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let (h, w) = self.dim();
        let data = self
            .dy
            .iter()
            .chain(self.dx.iter())
            .map(|v| F::from_f32(*v).unwrap())
            .collect();
        Tensor::from_vec([1, 2, h, w], data)
    }

    /// Field `n` of an `(N, 2, h, w)` tensor.
    pub fn from_tensor<F: Real>(t: &Tensor<F>, n: usize) -> Self {
        DeformationField {
            dy: t.plane(n, 0),
            dx: t.plane(n, 1),
        }
    }

    /// Rotates the field together with its vectors, so that warping a
    /// rotated image by the rotated field equals rotating the warped image.
    pub fn rotated(&self, quarter_turns: usize) -> Self {
        let (dy, dx) = (rot90(&self.dy, quarter_turns), rot90(&self.dx, quarter_turns));
        match quarter_turns % 4 {
            0 => DeformationField { dy, dx },
            1 => DeformationField { dy: -dx, dx: dy },
            2 => DeformationField { dy: -dy, dx: -dx },
            _ => DeformationField { dy: dx, dx: -dy },
        }
    }
}

/// Bilinear resampling `img ∘ field`, clamping out-of-range coordinates to
/// the border.
pub fn warp(img: &Image, field: &DeformationField) -> Result<Image> {
    if img.dim() != field.dim() {
        return Err(Error::shape(format!(
            "image {:?} vs field {:?}",
            img.dim(),
            field.dim()
        )));
    }
    if !field.is_finite() {
        return Err(Error::NonFinite("deformation field".into()));
    }
    let out = kernels::warp(&Tensor::<f64>::from_image(img), &field.to_tensor());
    Ok(out.plane(0, 0))
}

/// Mean over pixels and both components of the squared forward-difference
/// gradients; differences across the far border count as zero.
pub fn smoothness_penalty(field: &DeformationField) -> f64 {
    kernels::smoothness(&field.to_tensor::<f64>())
}

/// Widths of the learnable networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub denoiser_width: usize,
    pub registration_width: usize,
    pub depth: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            denoiser_width: 16,
            registration_width: 16,
            depth: 3,
            leaky_slope: 0.1,
        }
    }
}

impl NetConfig {
    pub fn denoiser(&self, in_channels: usize) -> UNetSpec {
        UNetSpec {
            in_channels,
            out_channels: 1,
            base_width: self.denoiser_width,
            depth: self.depth,
            leaky_slope: self.leaky_slope,
            zero_head: false,
        }
    }

    pub fn registration(&self) -> UNetSpec {
        UNetSpec {
            in_channels: 2,
            out_channels: 2,
            base_width: self.registration_width,
            depth: self.depth,
            leaky_slope: self.leaky_slope,
            zero_head: true,
        }
    }

    /// Channel count of the multi-frame denoiser input for `n_aux`
    /// auxiliary frames: denoised target, aligned auxiliaries, masked noisy
    /// target and raw auxiliaries.
    pub fn multi_channels(n_aux: usize) -> usize {
        2 * (n_aux + 1)
    }
}

/// Parameters of a denoising network (single frame: 1 input channel,
/// multi-frame: `2(N+1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<F = f32>(pub UNet<F>);

/// Parameters of the registration network: (moving, fixed) to (dy, dx).
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationParams<F = f32>(pub UNet<F>);

impl<F: Real> DenoiserParams<F> {
    pub fn new(cfg: &NetConfig, in_channels: usize, seed: u64) -> Self {
        DenoiserParams(UNet::new(cfg.denoiser(in_channels), seed))
    }

    pub fn in_channels(&self) -> usize {
        self.0.spec().in_channels
    }
}

impl<F: Real> RegistrationParams<F> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        RegistrationParams(UNet::new(cfg.registration(), seed))
    }
}

fn check_image_finite(img: &Image, what: &str) -> Result<()> {
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// One forward pass of the single-frame denoiser on an already-masked image.
pub fn denoise_single<F: Real>(params: &DenoiserParams<F>, masked_y: &Image) -> Result<Image> {
    if params.in_channels() != 1 {
        return Err(Error::invalid(format!(
            "single-frame denoiser must take 1 channel, has {}",
            params.in_channels()
        )));
    }
    check_image_finite(masked_y, "denoiser input")?;
    let mut g = Graph::new();
    let p = params.0.bind_frozen(&mut g);
    let x = g.constant(Tensor::from_image(masked_y));
    let y = params.0.forward(&mut g, &p, x);
    Ok(g.value(y).plane(0, 0))
}

/// Displacement mapping `fixed`'s grid into `moving`.
pub fn predict_field<F: Real>(
    params: &RegistrationParams<F>,
    moving: &Image,
    fixed: &Image,
) -> Result<DeformationField> {
    if moving.dim() != fixed.dim() {
        return Err(Error::shape(format!(
            "moving {:?} vs fixed {:?}",
            moving.dim(),
            fixed.dim()
        )));
    }
    check_image_finite(moving, "moving image")?;
    check_image_finite(fixed, "fixed image")?;
    let mut g = Graph::new();
    let p = params.0.bind_frozen(&mut g);
    let (h, w) = moving.dim();
    let x = g.constant(Tensor::<F>::from_images([moving, fixed]).reshaped([1, 2, h, w]));
    let y = params.0.forward(&mut g, &p, x);
    Ok(DeformationField::from_tensor(g.value(y), 0))
}

/// Multi-frame estimate from the ordered channel stack.
pub fn denoise_multi<F: Real>(params: &DenoiserParams<F>, inputs: &[Image]) -> Result<Image> {
    if inputs.len() != params.in_channels() {
        return Err(Error::invalid(format!(
            "multi-frame denoiser expects {} channels, got {}",
            params.in_channels(),
            inputs.len()
        )));
    }
    let (h, w) = inputs[0].dim();
    for img in inputs {
        if img.dim() != (h, w) {
            return Err(Error::shape("multi-frame inputs differ in shape"));
        }
        check_image_finite(img, "multi-frame input")?;
    }
    let mut g = Graph::new();
    let p = params.0.bind_frozen(&mut g);
    let x = g.constant(Tensor::<F>::from_images(inputs).reshaped([1, inputs.len(), h, w]));
    let y = params.0.forward(&mut g, &p, x);
    Ok(g.value(y).plane(0, 0))
}
