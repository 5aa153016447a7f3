//! Synthetic dynamic phantom: a contracting "myocardium" annulus around a
//! bright blood pool inside a static body with fixed landmarks, with known
//! ground-truth deformation fields.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::DeformationField;
use crate::rng::rng_from;
use crate::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    /// Radial scaling of the heart region; background static.
    Contraction,
    /// Rigid shift of the whole image along the row axis.
    Translation,
    /// Contraction followed by a column-axis shift.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub n_frames: usize,
    /// Peak displacement in pixels.
    pub motion_amplitude: f64,
    pub motion_kind: MotionKind,
    /// Blood-pool intensity scale reached at the first/last frame.
    pub contrast_drift: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            n_frames: 5,
            motion_amplitude: 3.0,
            motion_kind: MotionKind::Contraction,
            contrast_drift: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn target_index(&self) -> usize {
        self.n_frames / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::invalid(format!("phantom size must be >= 32, got {}", self.size)));
        }
        if self.n_frames < 2 {
            return Err(Error::invalid(format!(
                "phantom needs >= 2 frames, got {}",
                self.n_frames
            )));
        }
        let max_amp = 0.1 * self.size as f64;
        if !(0.0..=max_amp).contains(&self.motion_amplitude) {
            return Err(Error::invalid(format!(
                "motion amplitude must lie in [0, {max_amp}], got {}",
                self.motion_amplitude
            )));
        }
        if !(0.9..=1.1).contains(&self.contrast_drift) {
            return Err(Error::invalid(format!(
                "contrast drift must lie in [0.9, 1.1], got {}",
                self.contrast_drift
            )));
        }
        Ok(())
    }

    /// Cardiac-like phase in [0, 1]: zero at the target frame, raised cosine
    /// over one period spanning the sequence.
    pub fn motion_phase(&self, k: usize) -> f64 {
        let t = (k as f64 - self.target_index() as f64) / self.n_frames as f64;
        0.5 * (1.0 - (2.0 * PI * t).cos())
    }

    /// Signed phase in [-1, 1] for the secondary (column) shift of mixed motion.
    fn shift_phase(&self, k: usize) -> f64 {
        let t = (k as f64 - self.target_index() as f64) / self.n_frames as f64;
        (2.0 * PI * t).sin()
    }

    fn contrast(&self, k: usize) -> f64 {
        let t = self.target_index() as f64;
        let span = t.max(self.n_frames as f64 - 1.0 - t).max(1.0);
        let tau = ((k as f64 - t) / span).clamp(-1.0, 1.0);
        self.contrast_drift.powf(tau)
    }
}

#[derive(Clone, Debug)]
pub struct PhantomOutput {
    pub clean_frames: Vec<Image>,
    /// Field `k` maps the target grid into frame `k`.
    pub true_fields: Vec<DeformationField>,
    pub roi_mask: Array2<bool>,
    pub target_index: usize,
}

const OUTSIDE: f64 = 0.35;
const BODY: f64 = 0.5;
const MYOCARDIUM: f64 = 0.62;
const POOL: f64 = 0.72;
const EDGE_SOFTNESS: f64 = 0.35;

struct Layout {
    body_center: (f64, f64),
    body_radius: f64,
    heart_center: (f64, f64),
    inner_radius: f64,
    outer_radius: f64,
    /// Motion weight is 1 up to `outer_radius + 1` and falls to 0 here.
    falloff_radius: f64,
    landmarks: Vec<((f64, f64), f64, f64)>,
}

impl Layout {
    fn new(spec: &PhantomSpec) -> Self {
        let s = spec.size as f64;
        let mut rng = rng_from(spec.seed);
        let mut jitter = || (rng.random::<f64>() - 0.5) * 2.0;
        let heart_center = (0.42 * s + jitter(), 0.5 * s + jitter());
        let landmarks = vec![
            ((0.75 * s + jitter(), 0.28 * s + jitter()), 0.05 * s, 0.68),
            ((0.75 * s + jitter(), 0.72 * s + jitter()), 0.05 * s, 0.38),
        ];
        Layout {
            body_center: (0.5 * s, 0.5 * s),
            body_radius: 0.4 * s,
            heart_center,
            inner_radius: 0.12 * s,
            outer_radius: 0.2 * s,
            falloff_radius: 0.28 * s,
            landmarks,
        }
    }

    fn motion_weight(&self, r: f64) -> f64 {
        let start = self.outer_radius + 1.0;
        if r <= start {
            1.0
        } else if r >= self.falloff_radius {
            0.0
        } else {
            0.5 * (1.0 + (PI * (r - start) / (self.falloff_radius - start)).cos())
        }
    }

    /// Radial profile of the contraction: a target point at radius `r` sits
    /// at radius `r * (1 - a w(r) / R_out)` in the deformed frame.
    fn radial_map(&self, r: f64, a: f64) -> f64 {
        r * (1.0 - a * self.motion_weight(r) / self.outer_radius)
    }

    fn radial_inverse(&self, rho: f64, a: f64) -> f64 {
        if rho >= self.falloff_radius {
            return rho;
        }
        let (mut lo, mut hi) = (0.0, self.falloff_radius);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.radial_map(mid, a) < rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn intensity(&self, p: (f64, f64), pool: f64) -> f64 {
        let inside = |c: (f64, f64), radius: f64| {
            let r = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
            1.0 / (1.0 + ((r - radius) / EDGE_SOFTNESS).exp())
        };
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let mut v = lerp(OUTSIDE, BODY, inside(self.body_center, self.body_radius));
        for (c, radius, value) in &self.landmarks {
            v = lerp(v, *value, inside(*c, *radius));
        }
        v = lerp(v, MYOCARDIUM, inside(self.heart_center, self.outer_radius));
        v = lerp(v, pool, inside(self.heart_center, self.inner_radius));
        v.clamp(0.0, 1.0)
    }
}

struct Motion {
    contraction: f64,
    shift: (f64, f64),
}

fn frame_motion(spec: &PhantomSpec, k: usize) -> Motion {
    let a = spec.motion_amplitude;
    let s = spec.motion_phase(k);
    match spec.motion_kind {
        MotionKind::Contraction => Motion {
            contraction: a * s,
            shift: (0.0, 0.0),
        },
        MotionKind::Translation => Motion {
            contraction: 0.0,
            shift: (a * s, 0.0),
        },
        MotionKind::Mixed => Motion {
            contraction: a * s,
            shift: (0.0, 0.5 * a * spec.shift_phase(k)),
        },
    }
}

impl Motion {
    /// Where target point `p` lands in the frame.
    fn forward(&self, layout: &Layout, p: (f64, f64)) -> (f64, f64) {
        let c = layout.heart_center;
        let (dy, dx) = (p.0 - c.0, p.1 - c.1);
        let r = (dy * dy + dx * dx).sqrt();
        let (y, x) = if self.contraction == 0.0 || r == 0.0 {
            p
        } else {
            let scale = layout.radial_map(r, self.contraction) / r;
            (c.0 + dy * scale, c.1 + dx * scale)
        };
        (y + self.shift.0, x + self.shift.1)
    }

    /// Target point that lands on frame point `q`.
    fn inverse(&self, layout: &Layout, q: (f64, f64)) -> (f64, f64) {
        let q = (q.0 - self.shift.0, q.1 - self.shift.1);
        if self.contraction == 0.0 {
            return q;
        }
        let c = layout.heart_center;
        let (dy, dx) = (q.0 - c.0, q.1 - c.1);
        let rho = (dy * dy + dx * dx).sqrt();
        if rho == 0.0 {
            return q;
        }
        let scale = layout.radial_inverse(rho, self.contraction) / rho;
        (c.0 + dy * scale, c.1 + dx * scale)
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomOutput> {
    spec.validate()?;
    let n = spec.size;
    let layout = Layout::new(spec);
    let target = spec.target_index();

    let mut clean_frames = Vec::with_capacity(spec.n_frames);
    let mut true_fields = Vec::with_capacity(spec.n_frames);
    for k in 0..spec.n_frames {
        let motion = frame_motion(spec, k);
        let pool = POOL * spec.contrast(k);
        let frame = Array2::from_shape_fn((n, n), |(i, j)| {
            let p = motion.inverse(&layout, (i as f64, j as f64));
            layout.intensity(p, pool) as f32
        });
        let mut dy = Array2::zeros((n, n));
        let mut dx = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let q = motion.forward(&layout, (i as f64, j as f64));
                dy[[i, j]] = (q.0 - i as f64) as f32;
                dx[[i, j]] = (q.1 - j as f64) as f32;
            }
        }
        clean_frames.push(frame);
        true_fields.push(DeformationField { dy, dx });
    }

    let roi_mask = region_of_interest(&layout, &clean_frames, target);
    Ok(PhantomOutput {
        clean_frames,
        true_fields,
        roi_mask,
        target_index: target,
    })
}

/// Heart disk plus every pixel that changes across the sequence, dilated by
/// one pixel.
fn region_of_interest(layout: &Layout, frames: &[Image], target: usize) -> Array2<bool> {
    let (h, w) = frames[target].dim();
    let c = layout.heart_center;
    let core = Array2::from_shape_fn((h, w), |(i, j)| {
        let r = ((i as f64 - c.0).powi(2) + (j as f64 - c.1).powi(2)).sqrt();
        r <= layout.outer_radius + 1.0 || frames.iter().any(|f| (f[[i, j]] - frames[target][[i, j]]).abs() > 0.02)
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        (i.saturating_sub(1)..=(i + 1).min(h - 1))
            .any(|y| (j.saturating_sub(1)..=(j + 1).min(w - 1)).any(|x| core[[y, x]]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::warp;

    fn mean_abs(a: &Image, b: &Image) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn static_phantom_is_constant() {
        let spec = PhantomSpec {
            motion_amplitude: 0.0,
            contrast_drift: 1.0,
            ..PhantomSpec::default()
        };
        let out = generate_phantom(&spec).unwrap();
        assert_eq!(out.target_index, 2);
        for (f, u) in out.clean_frames.iter().zip(&out.true_fields) {
            assert_eq!(f, &out.clean_frames[0]);
            assert_eq!(u.max_abs(), 0.0);
        }
    }

    #[test]
    fn translation_field_is_analytic_shift() {
        let spec = PhantomSpec {
            motion_kind: MotionKind::Translation,
            motion_amplitude: 3.0,
            ..PhantomSpec::default()
        };
        let out = generate_phantom(&spec).unwrap();
        for (k, u) in out.true_fields.iter().enumerate() {
            let expected = 3.0 * spec.motion_phase(k);
            assert!(u.dy.iter().all(|v| (*v as f64 - expected).abs() < 1e-5));
            assert!(u.dx.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        for kind in [MotionKind::Contraction, MotionKind::Translation, MotionKind::Mixed] {
            for drift in [0.9, 1.1] {
                let spec = PhantomSpec {
                    motion_kind: kind,
                    contrast_drift: drift,
                    motion_amplitude: 5.0,
                    n_frames: 7,
                    ..PhantomSpec::default()
                };
                let out = generate_phantom(&spec).unwrap();
                for f in &out.clean_frames {
                    assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn warping_by_true_field_recovers_target() {
        for kind in [MotionKind::Contraction, MotionKind::Translation, MotionKind::Mixed] {
            for amp in [1.0, 3.0, 5.0] {
                let spec = PhantomSpec {
                    motion_kind: kind,
                    motion_amplitude: amp,
                    seed: 4,
                    ..PhantomSpec::default()
                };
                let out = generate_phantom(&spec).unwrap();
                let target = &out.clean_frames[out.target_index];
                for (f, u) in out.clean_frames.iter().zip(&out.true_fields) {
                    let err = mean_abs(&warp(f, u).unwrap(), target);
                    assert!(err < 0.01, "{kind:?} amp {amp}: mean abs error {err}");
                }
            }
        }
    }

    #[test]
    fn roi_covers_changing_pixels() {
        for kind in [MotionKind::Contraction, MotionKind::Translation, MotionKind::Mixed] {
            let spec = PhantomSpec {
                motion_kind: kind,
                motion_amplitude: 4.0,
                contrast_drift: 1.1,
                ..PhantomSpec::default()
            };
            let out = generate_phantom(&spec).unwrap();
            let (h, w) = out.roi_mask.dim();
            let near_roi = |i: usize, j: usize| {
                (i.saturating_sub(2)..=(i + 2).min(h - 1))
                    .any(|y| (j.saturating_sub(2)..=(j + 2).min(w - 1)).any(|x| out.roi_mask[[y, x]]))
            };
            for i in 0..h {
                for j in 0..w {
                    let vals: Vec<f32> = out.clean_frames.iter().map(|f| f[[i, j]]).collect();
                    let spread =
                        vals.iter().cloned().fold(f32::MIN, f32::max) - vals.iter().cloned().fold(f32::MAX, f32::min);
                    if spread > 0.05 {
                        assert!(near_roi(i, j), "{kind:?}: pixel ({i},{j}) changes by {spread}");
                    }
                }
            }
            assert!(out.roi_mask.iter().any(|v| *v));
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let spec = PhantomSpec {
            seed: 9,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.clean_frames, b.clean_frames);
        assert_eq!(a.roi_mask, b.roi_mask);
        assert!(generate_phantom(&PhantomSpec { size: 16, ..spec }).is_err());
        assert!(generate_phantom(&PhantomSpec { n_frames: 1, ..spec }).is_err());
        assert!(generate_phantom(&PhantomSpec {
            contrast_drift: 1.3,
            ..spec
        })
        .is_err());
    }
}
