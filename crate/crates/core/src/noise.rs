//! Seeded pixelwise noise simulators: additive Gaussian, scaled Poisson and
//! Rician magnitude noise. Outputs are never clipped.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, sub_seed};
use crate::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    /// Additive zero-mean normal noise, `sigma` in units of the [0, 1] range.
    Gaussian { sigma: f64 },
    /// `y = z / P` with `z ~ Poisson(P x)`.
    Poisson { p_level: f64 },
    /// Magnitude of a complex signal with independent normal noise per channel.
    Rician { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub model: NoiseModel,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(model: NoiseModel, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { model, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.model {
            NoiseModel::Gaussian { sigma } | NoiseModel::Rician { sigma } => check_sigma(sigma),
            NoiseModel::Poisson { p_level } => check_p_level(p_level),
        }
    }

    /// Noise for frame `k` of a sequence. Each frame draws from its own
    /// sub-seed so frames are independent and stable under appending.
    pub fn apply_to_frame(&self, x: &Image, k: usize) -> Result<Image> {
        let seed = sub_seed(self.seed, k as u64);
        match self.model {
            NoiseModel::Gaussian { sigma } => add_gaussian_noise(x, sigma, seed),
            NoiseModel::Poisson { p_level } => add_poisson_noise(x, p_level, seed),
            NoiseModel::Rician { sigma } => add_rician_noise(x, sigma, seed),
        }
    }

    pub fn apply_to_sequence(&self, frames: &[Image]) -> Result<Vec<Image>> {
        frames
            .iter()
            .enumerate()
            .map(|(k, x)| self.apply_to_frame(x, k))
            .collect()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

fn check_p_level(p_level: f64) -> Result<()> {
    if !(p_level > 0.0 && p_level.is_finite()) {
        return Err(Error::invalid(format!(
            "Poisson level P must be finite and > 0, got {p_level}"
        )));
    }
    Ok(())
}

fn check_finite(x: &Image) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input image".into()));
    }
    Ok(())
}

fn check_nonnegative(x: &Image, what: &str) -> Result<()> {
    check_finite(x)?;
    if let Some(v) = x.iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("{what} requires nonnegative pixels, found {v}")));
    }
    Ok(())
}

fn standard_normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

pub fn add_gaussian_noise(x: &Image, sigma: f64, seed: u64) -> Result<Image> {
    check_sigma(sigma)?;
    check_finite(x)?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng_from(seed);
    let normal = standard_normal(sigma);
    Ok(x.mapv(|v| (v as f64 + normal.sample(&mut rng)) as f32))
}

pub fn add_poisson_noise(x: &Image, p_level: f64, seed: u64) -> Result<Image> {
    check_p_level(p_level)?;
    check_nonnegative(x, "Poisson noise")?;
    let mut rng = rng_from(seed);
    Ok(x.mapv(|v| {
        let rate = p_level * v as f64;
        if rate == 0.0 {
            0.0
        } else {
            (sample_poisson(rate, &mut rng) / p_level) as f32
        }
    }))
}

fn sample_poisson<R: Rng>(rate: f64, rng: &mut R) -> f64 {
    Poisson::new(rate).expect("positive finite rate").sample(rng)
}

pub fn add_rician_noise(x: &Image, sigma: f64, seed: u64) -> Result<Image> {
    check_sigma(sigma)?;
    check_nonnegative(x, "Rician noise")?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng_from(seed);
    let normal = standard_normal(sigma);
    Ok(x.mapv(|v| {
        let re = v as f64 + normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        re.hypot(im) as f32
    }))
}
