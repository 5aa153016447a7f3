//! Per-sequence training and dropout-averaged inference of the three-stage
//! pipeline, plus its ablation variants.

pub mod checkpoint;
pub mod losses;
pub mod model;

use log::{debug, info};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nets::{rot90, sample_mask, BlindSpotMask, DeformationField, NetConfig};
use crate::rng::{rng_from, sub_seed, tagged_seed};
use crate::tensor::Tensor;
use crate::Image;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use losses::{loss_multi, loss_registration, loss_single, total_loss};
pub use model::{build_forward, Forward, Networks, PassInputs};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    #[serde(alias = "none")]
    Full,
    /// No single-frame stage: registration runs on the noisy frames.
    NoSingle,
    /// No registration: the multi-frame denoiser sees unaligned frames.
    NoRegistration,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::Full),
            "no_single" => Ok(Ablation::NoSingle),
            "no_registration" => Ok(Ablation::NoRegistration),
            other => Err(Error::invalid(format!(
                "unknown ablation {other:?} (expected none, no_single or no_registration)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_aux: usize,
    pub lambda_smooth: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub n_train: u64,
    pub n_test: usize,
    pub augment_rotations: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_aux: 4,
            lambda_smooth: 0.1,
            lambda_s: 1.0,
            lambda_r: 1.0,
            dropout_rate: 0.3,
            learning_rate: 1e-4,
            n_train: 500,
            n_test: 100,
            augment_rotations: true,
            seed: 0,
            ablation: Ablation::Full,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.n_aux < 1 {
            return Err(Error::invalid("n_aux must be >= 1"));
        }
        if self.n_train < 1 {
            return Err(Error::invalid("n_train must be >= 1"));
        }
        if self.n_test < 1 {
            return Err(Error::invalid("n_test must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        let net = &self.net;
        if net.denoiser_width == 0 || net.registration_width == 0 || net.depth == 0 || net.depth > 6 {
            return Err(Error::invalid(format!("unsupported network configuration {net:?}")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Noisy target frame, its auxiliary frames and optional evaluation data.
#[derive(Clone, Debug)]
pub struct FrameStack {
    pub target: Image,
    pub auxiliaries: Vec<Image>,
    pub clean: Option<Image>,
    pub roi: Option<Array2<bool>>,
}

impl FrameStack {
    pub fn new(target: Image, auxiliaries: Vec<Image>) -> Self {
        FrameStack {
            target,
            auxiliaries,
            clean: None,
            roi: None,
        }
    }

    pub fn validate(&self, n_aux: usize) -> Result<()> {
        if self.auxiliaries.len() != n_aux {
            return Err(Error::invalid(format!(
                "expected {n_aux} auxiliary frames, got {}",
                self.auxiliaries.len()
            )));
        }
        let dim = self.target.dim();
        if dim.0 < 2 || dim.1 < 2 {
            return Err(Error::invalid(format!("frames too small: {dim:?}")));
        }
        for (k, f) in self.auxiliaries.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::shape(format!(
                    "auxiliary frame {} is {:?}, target is {dim:?}",
                    k + 1,
                    f.dim()
                )));
            }
        }
        if let Some(c) = &self.clean {
            if c.dim() != dim {
                return Err(Error::shape("clean reference differs in shape from the target"));
            }
        }
        if let Some(r) = &self.roi {
            if r.dim() != dim {
                return Err(Error::shape("ROI differs in shape from the target"));
            }
        }
        for f in self.frames() {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("input frame".into()));
            }
        }
        Ok(())
    }

    /// Target followed by the auxiliaries.
    pub fn frames(&self) -> impl Iterator<Item = &Image> {
        std::iter::once(&self.target).chain(&self.auxiliaries)
    }
}

/// Adaptive-moment optimizer over a flat list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new<'a>(learning_rate: f64, params: impl Iterator<Item = &'a Tensor<f32>>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor<f32>>, grads: &[Tensor<f32>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.learning_rate / (1.0 - self.beta1.powi(t))) as f32;
        let bias2 = (1.0 - self.beta2.powi(t)).sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() / bias2 + eps);
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss_single: f64,
    pub loss_registration: f64,
    pub loss_multi: f64,
    pub total: f64,
}

/// Trainable state of one per-sequence model.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub config: TrainConfig,
    pub networks: Networks<f32>,
    pub optimizer: Adam,
    /// Completed optimizer steps; also keys the per-iteration random streams.
    pub iteration: u64,
}

fn masks_for(shape: (usize, usize), count: usize, rate: f64, seed: u64) -> Result<(Vec<BlindSpotMask>, BlindSpotMask)> {
    let single = (0..count)
        .map(|k| sample_mask(shape, rate, sub_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let multi = sample_mask(shape, rate, sub_seed(seed, count as u64))?;
    Ok((single, multi))
}

impl PipelineState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let networks = Networks::new(&config.net, config.n_aux, config.seed);
        let optimizer = Adam::new(config.learning_rate, networks.params());
        Ok(PipelineState {
            config,
            networks,
            optimizer,
            iteration: 0,
        })
    }

    pub fn ensure_compatible(&self, n_aux: usize) -> Result<()> {
        if self.config.n_aux != n_aux {
            return Err(Error::invalid(format!(
                "model was trained with n_aux = {} but {} auxiliary frames were supplied",
                self.config.n_aux, n_aux
            )));
        }
        Ok(())
    }

    /// One optimizer step on a freshly rotated and masked copy of the stack.
    pub fn step(&mut self, stack: &FrameStack) -> Result<LossRecord> {
        let cfg = self.config;
        let it = self.iteration;
        let turns = if cfg.augment_rotations {
            rng_from(tagged_seed(cfg.seed, "rotation", it)).random_range(0..4usize)
        } else {
            0
        };
        let frames: Vec<Image> = stack.frames().map(|f| rot90(f, turns)).collect();
        let (masks_single, mask_multi) = masks_for(
            frames[0].dim(),
            frames.len(),
            cfg.dropout_rate,
            tagged_seed(cfg.seed, "train-mask", it),
        )?;

        let mut g = Graph::new();
        let bound = self.networks.bind(&mut g, true);
        let inputs = PassInputs {
            frames: &frames,
            masks_single: &masks_single,
            mask_multi: &mask_multi,
        };
        let fwd = build_forward(&mut g, &self.networks, &bound, &inputs, &cfg);
        let scalar = |v: Option<crate::autodiff::Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
        let record = LossRecord {
            iteration: it,
            loss_single: scalar(fwd.loss_single),
            loss_registration: scalar(fwd.loss_registration),
            loss_multi: scalar(Some(fwd.loss_multi)),
            total: scalar(Some(fwd.total)),
        };
        if !record.total.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!(
                    "non-finite loss (L_s = {}, L_r = {}, L_m = {})",
                    record.loss_single, record.loss_registration, record.loss_multi
                ),
            });
        }

        let mut grads = g.backward(fwd.total);
        // Networks switched off by an ablation receive zero gradients.
        let grads: Vec<Tensor<f32>> = bound
            .all()
            .zip(self.networks.params())
            .map(|(v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                detail: "non-finite gradient".into(),
            });
        }
        self.optimizer.update(self.networks.params_mut(), &grads);
        self.iteration += 1;
        Ok(record)
    }

    /// Runs `iterations` optimizer steps, reporting each loss row.
    pub fn fit(&mut self, stack: &FrameStack, iterations: u64, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        stack.validate(self.config.n_aux)?;
        for _ in 0..iterations {
            let record = self.step(stack)?;
            if record.iteration % 50 == 0 {
                debug!(
                    "iter {} L_s {:.5} L_r {:.5} L_m {:.5} L {:.5}",
                    record.iteration, record.loss_single, record.loss_registration, record.loss_multi, record.total
                );
            }
            on_step(&record);
        }
        Ok(())
    }

    /// One stochastic forward pass with fresh masks and no rotation,
    /// returning the intermediate images as well as the estimate.
    pub fn sample_pass(&self, stack: &FrameStack, mask_seed: u64) -> Result<PassOutputs> {
        let frames: Vec<Image> = stack.frames().cloned().collect();
        let (masks_single, mask_multi) = masks_for(frames[0].dim(), frames.len(), self.config.dropout_rate, mask_seed)?;
        let mut g = Graph::new();
        let bound = self.networks.bind(&mut g, false);
        let inputs = PassInputs {
            frames: &frames,
            masks_single: &masks_single,
            mask_multi: &mask_multi,
        };
        let fwd = build_forward(&mut g, &self.networks, &bound, &inputs, &self.config);
        let planes = |v: crate::autodiff::Var| {
            let t = g.value(v);
            (0..t.shape()[0]).map(|n| t.plane(n, 0)).collect::<Vec<_>>()
        };
        Ok(PassOutputs {
            estimate: g.value(fwd.estimate).plane(0, 0),
            denoised: fwd.denoised.map(planes),
            fields: fwd.fields.map(|f| {
                let t = g.value(f);
                (0..t.shape()[0]).map(|n| DeformationField::from_tensor(t, n)).collect()
            }),
        })
    }

    pub fn sample_estimate(&self, stack: &FrameStack, mask_seed: u64) -> Result<Image> {
        Ok(self.sample_pass(stack, mask_seed)?.estimate)
    }
}

/// Images produced by one forward pass.
#[derive(Clone, Debug)]
pub struct PassOutputs {
    pub estimate: Image,
    /// Single-frame outputs, target first; absent without that stage.
    pub denoised: Option<Vec<Image>>,
    /// Predicted fields of the auxiliary frames.
    pub fields: Option<Vec<DeformationField>>,
}

/// Trains a fresh model for `cfg.n_train` iterations.
pub fn train(stack: &FrameStack, cfg: &TrainConfig) -> Result<(PipelineState, Vec<LossRecord>)> {
    let mut state = PipelineState::new(*cfg)?;
    let mut log = Vec::with_capacity(cfg.n_train as usize);
    info!("training {:?} for {} iterations", cfg.ablation, cfg.n_train);
    state.fit(stack, cfg.n_train, |r| log.push(*r))?;
    Ok((state, log))
}

/// Mask seed of inference pass `pass`.
pub fn inference_seed(seed: u64, pass: usize) -> u64 {
    tagged_seed(seed, "infer", pass as u64)
}

/// Pixelwise mean of `n_test` dropout-enabled forward passes.
pub fn infer(state: &PipelineState, stack: &FrameStack, n_test: usize, seed: u64) -> Result<Image> {
    if n_test < 1 {
        return Err(Error::invalid("n_test must be >= 1"));
    }
    state.ensure_compatible(stack.auxiliaries.len())?;
    stack.validate(state.config.n_aux)?;
    let mut acc = Array2::<f64>::zeros(stack.target.dim());
    for pass in 0..n_test {
        let est = state.sample_estimate(stack, inference_seed(seed, pass))?;
        acc.zip_mut_with(&est, |a, v| *a += *v as f64);
    }
    Ok(acc.mapv(|v| (v / n_test as f64) as f32))
}
