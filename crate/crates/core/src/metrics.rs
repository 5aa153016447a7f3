//! PSNR and SSIM, globally and restricted to a region of interest. Both
//! images are clipped to `[0, peak]` before any metric is computed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "estimate {:?} vs reference {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn clipped(img: &Image, peak: f64) -> Array2<f64> {
    img.mapv(|v| (v as f64).clamp(0.0, peak))
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10 log10(peak^2 / MSE)`; identical images give `+inf`.
pub fn psnr(estimate: &Image, reference: &Image, peak: f64) -> Result<f64> {
    check_shapes(estimate, reference)?;
    let (a, b) = (clipped(estimate, peak), clipped(reference, peak));
    Ok(psnr_from_mse(mse_where(&a, &b, |_| true), peak))
}

/// Mean squared difference over the pixels selected by `keep`, summed in
/// row-major order so global and full-ROI results agree bit for bit.
fn mse_where(a: &Array2<f64>, b: &Array2<f64>, keep: impl Fn((usize, usize)) -> bool) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((idx, x), y) in a.indexed_iter().zip(b.iter()) {
        if keep(idx) {
            sum += (x - y).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

fn mean_where(map: &Array2<f64>, keep: impl Fn((usize, usize)) -> bool) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (idx, v) in map.indexed_iter() {
        if keep(idx) {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering keeping only windows that fit entirely
/// inside the image.
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows: Array2<f64> =
        Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|t| win[t] * img[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        (0..k).map(|t| win[t] * rows[[i + t, j]]).sum::<f64>()
    })
}

/// Local SSIM at every valid window centre; entry `(i, j)` belongs to image
/// pixel `(i + r, j + r)` with `r = SSIM_WINDOW / 2`.
fn ssim_map(estimate: &Image, reference: &Image) -> Result<Array2<f64>> {
    check_shapes(estimate, reference)?;
    let (h, w) = estimate.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (clipped(estimate, 1.0), clipped(reference, 1.0));
    let win = gaussian_window();
    let mu_x = filter_valid(&x, &win);
    let mu_y = filter_valid(&y, &win);
    let xx = filter_valid(&(&x * &x), &win);
    let yy = filter_valid(&(&y * &y), &win);
    let xy = filter_valid(&(&x * &y), &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut out = Array2::zeros(mu_x.dim());
    ndarray::Zip::from(&mut out)
        .and(&mu_x)
        .and(&mu_y)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|o, &mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            *o = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(out)
}

/// Mean SSIM over all windows, 11x11 Gaussian (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, data range 1.
pub fn ssim(estimate: &Image, reference: &Image) -> Result<f64> {
    let map = ssim_map(estimate, reference)?;
    Ok(mean_where(&map, |_| true).expect("non-empty map"))
}

/// PSNR over ROI pixels and SSIM averaged over windows centred in the ROI.
pub fn masked_metrics(estimate: &Image, reference: &Image, roi: &Array2<bool>) -> Result<(f64, f64)> {
    check_shapes(estimate, reference)?;
    if roi.dim() != estimate.dim() {
        return Err(Error::shape(format!(
            "roi {:?} vs image {:?}",
            roi.dim(),
            estimate.dim()
        )));
    }
    let count = roi.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(Error::invalid("region of interest is empty"));
    }
    let (a, b) = (clipped(estimate, 1.0), clipped(reference, 1.0));
    let mse = mse_where(&a, &b, |idx| roi[idx]);

    let map = ssim_map(estimate, reference)?;
    let r = SSIM_WINDOW / 2;
    let roi_ssim = mean_where(&map, |(i, j)| roi[[i + r, j + r]])
        .ok_or_else(|| Error::invalid("region of interest contains no complete SSIM window centre"))?;
    Ok((psnr_from_mse(mse, 1.0), roi_ssim))
}

/// Serializes non-finite dB values as the strings "inf" / "-inf" / "nan".
mod db {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected metric value {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(with = "db::option")]
    pub roi_psnr: Option<f64>,
    pub roi_ssim: Option<f64>,
    pub noise_spec: Option<NoiseSpec>,
    pub seed: Option<u64>,
    pub method: String,
}

impl EvalReport {
    pub fn evaluate(
        estimate: &Image,
        reference: &Image,
        roi: Option<&Array2<bool>>,
        method: impl Into<String>,
    ) -> Result<Self> {
        let (roi_psnr, roi_ssim) = match roi {
            Some(mask) => {
                let (p, s) = masked_metrics(estimate, reference, mask)?;
                (Some(p), Some(s))
            }
            None => (None, None),
        };
        Ok(EvalReport {
            psnr: psnr(estimate, reference, 1.0)?,
            ssim: ssim(estimate, reference)?,
            roi_psnr,
            roi_ssim,
            noise_spec: None,
            seed: None,
            method: method.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, a: f64, b: f64) -> Image {
        Array2::from_shape_fn((h, w), |(i, j)| {
            (0.5 + 0.4 * ((i as f64 * a).sin() * (j as f64 * b + 0.3).cos())) as f32
        })
    }

    #[test]
    fn psnr_examples() {
        let x = pattern(16, 16, 0.3, 0.2);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let a = Array2::from_elem((10, 10), 0.5f32);
        let b = Array2::from_elem((10, 10), 0.6f32);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &pattern(10, 11, 0.1, 0.1), 1.0).is_err());
    }

    #[test]
    fn psnr_clips_before_comparing() {
        let a = Array2::from_elem((4, 4), 1.4f32);
        let b = Array2::from_elem((4, 4), 1.0f32);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = pattern(24, 20, 0.3, 0.7);
        let y = pattern(24, 20, 0.31, 0.5);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let (s1, s2) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 < 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (c1, c2) = (0.3f64, 0.7f64);
        let a = Array2::from_elem((16, 16), c1 as f32);
        let b = Array2::from_elem((16, 16), c2 as f32);
        let k = SSIM_K1 * SSIM_K1;
        let (c1, c2) = (c1 as f32 as f64, c2 as f32 as f64);
        let expected = (2.0 * c1 * c2 + k) / (c1 * c1 + c2 * c2 + k);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_too_small() {
        let x = pattern(10, 30, 0.1, 0.1);
        assert!(matches!(ssim(&x, &x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn roi_metrics() {
        let x = pattern(20, 20, 0.3, 0.2);
        let y = pattern(20, 20, 0.5, 0.1);
        let all = Array2::from_elem((20, 20), true);
        let (p, s) = masked_metrics(&x, &y, &all).unwrap();
        assert_eq!(p, psnr(&x, &y, 1.0).unwrap());
        assert_eq!(s, ssim(&x, &y).unwrap());

        let mut z = x.clone();
        let mut roi = Array2::from_elem((20, 20), false);
        for i in 8..12 {
            for j in 8..12 {
                roi[[i, j]] = true;
            }
        }
        z.indexed_iter_mut().for_each(|((i, j), v)| {
            if !roi[[i, j]] {
                *v = 1.0 - *v;
            }
        });
        assert_eq!(masked_metrics(&z, &x, &roi).unwrap().0, f64::INFINITY);
        assert!(masked_metrics(&x, &y, &Array2::from_elem((20, 20), false)).is_err());
    }

    #[test]
    fn report_round_trip() {
        let x = pattern(16, 16, 0.3, 0.2);
        let roi = Array2::from_elem((16, 16), true);
        let report = EvalReport::evaluate(&x, &x, Some(&roi), "identity").unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let y = pattern(16, 16, 0.35, 0.2);
        let report = EvalReport::evaluate(&y, &x, None, "other").unwrap();
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert!((back.psnr - report.psnr).abs() <= 1e-12 * report.psnr.abs());
        assert_eq!(back, report);
    }
}
