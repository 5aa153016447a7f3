//! Construction of one forward pass of the three-stage pipeline on the
//! autodiff tape, shared by training, inference and the gradient checks.

use crate::autodiff::{Graph, Var};
use crate::nets::{BlindSpotMask, DenoiserParams, NetConfig, RegistrationParams};
use crate::pipeline::{Ablation, TrainConfig};
use crate::rng::tagged_seed;
use crate::tensor::{Real, Tensor};
use crate::Image;

/// The three learnable networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<F = f32> {
    pub single: DenoiserParams<F>,
    pub registration: RegistrationParams<F>,
    pub multi: DenoiserParams<F>,
}

impl<F: Real> Networks<F> {
    pub fn new(net: &NetConfig, n_aux: usize, seed: u64) -> Self {
        Networks {
            single: DenoiserParams::new(net, 1, tagged_seed(seed, "init-single", 0)),
            registration: RegistrationParams::new(net, tagged_seed(seed, "init-registration", 0)),
            multi: DenoiserParams::new(
                net,
                NetConfig::multi_channels(n_aux),
                tagged_seed(seed, "init-multi", 0),
            ),
        }
    }

    /// All parameter tensors in a fixed order: single, registration, multi.
    pub fn params(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.single
            .0
            .params()
            .iter()
            .chain(self.registration.0.params())
            .chain(self.multi.0.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.single
            .0
            .params_mut()
            .iter_mut()
            .chain(self.registration.0.params_mut().iter_mut())
            .chain(self.multi.0.params_mut().iter_mut())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundNetworks {
        let bind = |net: &crate::nets::UNet<F>, g: &mut Graph<F>| {
            if trainable {
                net.bind(g)
            } else {
                net.bind_frozen(g)
            }
        };
        BoundNetworks {
            single: bind(&self.single.0, g),
            registration: bind(&self.registration.0, g),
            multi: bind(&self.multi.0, g),
        }
    }

    pub fn cast<G: Real>(&self) -> Networks<G> {
        Networks {
            single: DenoiserParams(self.single.0.cast()),
            registration: RegistrationParams(self.registration.0.cast()),
            multi: DenoiserParams(self.multi.0.cast()),
        }
    }
}

pub struct BoundNetworks {
    pub single: Vec<Var>,
    pub registration: Vec<Var>,
    pub multi: Vec<Var>,
}

impl BoundNetworks {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.single.iter().chain(&self.registration).chain(&self.multi).copied()
    }
}

/// Noisy frames (target first) and the dropout masks of one pass.
pub struct PassInputs<'a> {
    pub frames: &'a [Image],
    /// One mask per frame for the single-frame denoiser.
    pub masks_single: &'a [BlindSpotMask],
    /// Mask on the target frame for the multi-frame denoiser.
    pub mask_multi: &'a BlindSpotMask,
}

/// Handles to the intermediate results of one pass.
pub struct Forward {
    /// Single-frame outputs, `(N+1, 1, h, w)`; absent without that stage.
    pub denoised: Option<Var>,
    /// Predicted fields, `(N, 2, h, w)`.
    pub fields: Option<Var>,
    /// Auxiliary frames resampled onto the target grid, `(N, 1, h, w)`.
    pub aligned: Option<Var>,
    /// Final target estimate, `(1, 1, h, w)`.
    pub estimate: Var,
    pub loss_single: Option<Var>,
    pub loss_registration: Option<Var>,
    pub loss_multi: Var,
    pub total: Var,
}

fn stacked<F: Real>(imgs: &[Image]) -> Tensor<F> {
    Tensor::from_images(imgs)
}

pub fn build_forward<F: Real>(
    g: &mut Graph<F>,
    nets: &Networks<F>,
    bound: &BoundNetworks,
    inputs: &PassInputs<'_>,
    cfg: &TrainConfig,
) -> Forward {
    let frames = inputs.frames;
    let n_aux = frames.len() - 1;
    let (h, w) = frames[0].dim();
    let f = F::from_f64_lossy;

    let noisy = g.constant(stacked(frames));
    let target = g.constant(stacked(&frames[..1]));
    let aux_noisy = g.constant(stacked(&frames[1..]));
    let target_masked = {
        let keep = inputs.mask_multi.keep_factor();
        g.constant(stacked::<F>(&[&frames[0] * &keep]))
    };

    // Stage 1: blind-spot single-frame denoising of every frame.
    let (denoised, loss_single) = if cfg.ablation == Ablation::NoSingle {
        (None, None)
    } else {
        let keep: Vec<Image> = inputs.masks_single.iter().map(|m| m.keep_factor()).collect();
        let masked = g.mul_const(noisy, stacked(&keep));
        let out = nets.single.0.forward(g, &bound.single, masked);
        let weights: Vec<Image> = inputs
            .masks_single
            .iter()
            .map(|m| m.loss_weights() / (n_aux + 1) as f32)
            .collect();
        let loss = g.weighted_sq_err(out, noisy, Some(stacked(&weights)), F::one());
        (Some(out), Some(loss))
    };

    // Stage 2: register auxiliaries onto the target.
    let (moving, fixed) = match denoised {
        Some(d) => {
            let target_denoised = g.slice_batch(d, 0, 1);
            let moving = g.slice_batch(d, 1, n_aux);
            (moving, g.repeat_batch(target_denoised, n_aux))
        }
        None => (aux_noisy, g.repeat_batch(target, n_aux)),
    };
    let (fields, aligned, loss_registration) = if cfg.ablation == Ablation::NoRegistration {
        (None, None, None)
    } else {
        let pair = g.concat(&[moving, fixed]);
        let field = nets.registration.0.forward(g, &bound.registration, pair);
        let aligned = g.warp(moving, field);
        let similarity = g.weighted_sq_err(aligned, fixed, None, f(1.0 / (n_aux * h * w) as f64));
        let smooth = g.smoothness(field);
        let loss = g.linear_combination(&[(similarity, F::one()), (smooth, f(cfg.lambda_smooth))]);
        (Some(field), Some(aligned), Some(loss))
    };

    // Stage 3: fuse into the target estimate. Channel order: denoised target,
    // aligned auxiliaries, masked noisy target, raw noisy auxiliaries.
    let first = match denoised {
        Some(d) => g.slice_batch(d, 0, 1),
        None => target_masked,
    };
    let aux_channels = aligned.unwrap_or(moving);
    let aux_channels = g.reshape(aux_channels, [1, n_aux, h, w]);
    let raw_aux = g.reshape(aux_noisy, [1, n_aux, h, w]);
    let stack = g.concat(&[first, aux_channels, target_masked, raw_aux]);
    let estimate = nets.multi.0.forward(g, &bound.multi, stack);
    let loss_multi = g.weighted_sq_err(
        estimate,
        target,
        Some(stacked(&[inputs.mask_multi.loss_weights()])),
        F::one(),
    );

    let mut terms = vec![(loss_multi, F::one())];
    if let Some(l) = loss_single {
        terms.push((l, f(cfg.lambda_s)));
    }
    if let Some(l) = loss_registration {
        terms.push((l, f(cfg.lambda_r)));
    }
    let total = g.linear_combination(&terms);

    Forward {
        denoised,
        fields,
        aligned,
        estimate,
        loss_single,
        loss_registration,
        loss_multi,
        total,
    }
}
