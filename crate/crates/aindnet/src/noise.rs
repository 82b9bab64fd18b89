//! Synthetic camera noise: white Gaussian, signal-dependent Gaussian, and a
//! simplified in-camera pipeline built from a parametric response-curve
//! family. Every sampler is a pure function of its seed.
//!
//! Ground-truth noise-level maps are computed pre-clipping. For the
//! pipeline, the display-domain level is obtained by first-order
//! propagation of the linear-domain standard deviation through the
//! response curve, which a Monte-Carlo oracle validates in the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{upsample_bilinear, Scalar, Shape, Tensor};

/// Response curves steeper than this near zero are evaluated at a floored
/// intensity so the propagated level stays bounded.
const CRF_DERIVATIVE_FLOOR: f64 = 1e-3;

/// One heteroscedastic noise instance: signal-dependent level, signal-
/// independent level, response-curve exponent, and the seed that fixes
/// the realization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_s: f64,
    pub sigma_c: f64,
    pub crf_gamma: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn new(sigma_s: f64, sigma_c: f64, crf_gamma: f64, seed: u64) -> Self {
        assert!(sigma_s >= 0.0 && sigma_c >= 0.0, "noise levels must be nonnegative");
        assert!(crf_gamma > 0.0, "response exponent must be positive");
        NoiseParams { sigma_s, sigma_c, crf_gamma, seed }
    }
}

/// Additive white Gaussian noise with constant level, clipped to [0, 1].
/// Returns the noisy image and the (constant) full-resolution level map.
pub fn sample_awgn<T: Scalar>(
    clean: &Tensor<T>,
    sigma: f64,
    seed: u64,
) -> (Tensor<T>, Tensor<T>) {
    assert!(sigma >= 0.0, "negative noise level: {sigma}");
    let map = Tensor::filled(clean.shape, T::from_f64(sigma).unwrap());
    if sigma == 0.0 {
        return (clean.clone(), map);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = clean
        .data
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            let y = v.to_f64().unwrap() + sigma * n;
            T::from_f64(y.clamp(0.0, 1.0)).unwrap()
        })
        .collect();
    (Tensor::new(clean.shape, data), map)
}

/// Zero-mean Gaussian noise whose per-pixel variance is
/// `x * sigma_s^2 + sigma_c^2` in the linear domain. Returns the noisy
/// (unclipped) image and the variance map.
pub fn sample_heteroscedastic<T: Scalar>(
    clean_linear: &Tensor<T>,
    p: &NoiseParams,
) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut noisy = Vec::with_capacity(clean_linear.len());
    let mut var = Vec::with_capacity(clean_linear.len());
    for &v in &clean_linear.data {
        let x = v.to_f64().unwrap();
        let vx = x * p.sigma_s * p.sigma_s + p.sigma_c * p.sigma_c;
        let n: f64 = StandardNormal.sample(&mut rng);
        noisy.push(T::from_f64(x + vx.sqrt() * n).unwrap());
        var.push(T::from_f64(vx).unwrap());
    }
    (
        Tensor::new(clean_linear.shape, noisy),
        Tensor::new(clean_linear.shape, var),
    )
}

/// Parametric camera response curve: x^(1/gamma) on [0, 1]. gamma = 1 is
/// the exact identity.
pub fn apply_crf<T: Scalar>(linear: &Tensor<T>, crf_gamma: f64) -> Tensor<T> {
    assert!(crf_gamma > 0.0, "response exponent must be positive");
    if crf_gamma == 1.0 {
        return linear.clone();
    }
    let e = 1.0 / crf_gamma;
    linear.map(|v| T::from_f64(v.to_f64().unwrap().clamp(0.0, 1.0).powf(e)).unwrap())
}

/// Inverse of [`apply_crf`]: x^gamma.
pub fn invert_crf<T: Scalar>(display: &Tensor<T>, crf_gamma: f64) -> Tensor<T> {
    assert!(crf_gamma > 0.0, "response exponent must be positive");
    if crf_gamma == 1.0 {
        return display.clone();
    }
    display.map(|v| T::from_f64(v.to_f64().unwrap().clamp(0.0, 1.0).powf(crf_gamma)).unwrap())
}

/// Derivative of the response curve, floored away from the singularity
/// at zero so propagated levels stay bounded.
fn crf_derivative(x_linear: f64, crf_gamma: f64) -> f64 {
    if crf_gamma == 1.0 {
        return 1.0;
    }
    let e = 1.0 / crf_gamma;
    let t = x_linear.max(CRF_DERIVATIVE_FLOOR);
    e * t.powf(e - 1.0)
}

/// A noisy/clean pair with ground-truth level maps at full and quarter
/// resolution.
pub struct NoisePair<T: Scalar> {
    pub noisy: Tensor<T>,
    pub sigma1: Tensor<T>,
    pub sigma4: Tensor<T>,
}

/// Run a display-referred clean image through the synthetic pipeline:
/// undo the response curve, add signal-dependent noise in the linear
/// domain, re-apply the curve, clip. An optional smooth modulation field
/// scales both noise levels per pixel.
pub fn synthesize_pair<T: Scalar>(
    clean_display: &Tensor<T>,
    p: &NoiseParams,
    level_field: Option<&Tensor<T>>,
) -> NoisePair<T> {
    if p.sigma_s == 0.0 && p.sigma_c == 0.0 {
        let sigma1 = Tensor::zeros(clean_display.shape);
        let sigma4 = crate::tensor::avg_pool(&sigma1, 4);
        return NoisePair { noisy: clean_display.clone(), sigma1, sigma4 };
    }
    if let Some(f) = level_field {
        assert_eq!(f.shape, clean_display.shape, "level field shape mismatch");
    }

    let linear = invert_crf(clean_display, p.crf_gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut noisy = Vec::with_capacity(linear.len());
    let mut sigma1 = Vec::with_capacity(linear.len());
    for (i, &v) in linear.data.iter().enumerate() {
        let x = v.to_f64().unwrap();
        let scale = level_field.map_or(1.0, |f| f.data[i].to_f64().unwrap());
        let ss = p.sigma_s * scale;
        let sc = p.sigma_c * scale;
        let std_linear = (x * ss * ss + sc * sc).sqrt();
        let n: f64 = StandardNormal.sample(&mut rng);
        let y_linear = (x + std_linear * n).clamp(0.0, 1.0);
        let y = if p.crf_gamma == 1.0 { y_linear } else { y_linear.powf(1.0 / p.crf_gamma) };
        noisy.push(T::from_f64(y.clamp(0.0, 1.0)).unwrap());
        sigma1.push(T::from_f64(crf_derivative(x, p.crf_gamma) * std_linear).unwrap());
    }
    let sigma1 = Tensor::new(clean_display.shape, sigma1);
    let sigma4 = crate::tensor::avg_pool(&sigma1, 4);
    NoisePair { noisy: Tensor::new(clean_display.shape, noisy), sigma1, sigma4 }
}

/// A closed interval of admissible parameter values.
pub type Range = (f64, f64);

fn range_valid(r: Range) -> bool {
    r.0 <= r.1 && r.0.is_finite() && r.1.is_finite()
}

/// Description of one noise domain: where its parameters are drawn from
/// and whether noise levels vary smoothly across the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDomain {
    pub sigma_s: Range,
    pub sigma_c: Range,
    pub crf_gamma: Range,
    /// Draw a smooth per-pixel modulation of the noise levels in
    /// [0.5, 1.5] instead of keeping them spatially constant.
    pub spatially_varying: bool,
}

impl NoiseDomain {
    /// The synthetic-noise regime used for first-stage training.
    pub fn synthetic_default() -> Self {
        NoiseDomain {
            sigma_s: (0.0, 0.16),
            sigma_c: (0.0, 0.06),
            crf_gamma: (1.6, 2.6),
            spatially_varying: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("empty or invalid range for {0}: [{1}, {2}]")]
    EmptyRange(&'static str, f64, f64),
}

/// Draws noise parameters from one domain.
#[derive(Clone, Copy, Debug)]
pub struct DomainSampler {
    pub domain: NoiseDomain,
}

impl DomainSampler {
    pub fn new(domain: NoiseDomain) -> Result<Self, DomainError> {
        for (name, r) in [
            ("sigma_s", domain.sigma_s),
            ("sigma_c", domain.sigma_c),
            ("crf_gamma", domain.crf_gamma),
        ] {
            if !range_valid(r) {
                return Err(DomainError::EmptyRange(name, r.0, r.1));
            }
        }
        if domain.crf_gamma.0 <= 0.0 {
            return Err(DomainError::EmptyRange(
                "crf_gamma",
                domain.crf_gamma.0,
                domain.crf_gamma.1,
            ));
        }
        Ok(DomainSampler { domain })
    }

    /// Draw one parameter set. The embedded seed derives from the rng so
    /// the realization is reproducible with the draw.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> NoiseParams {
        let d = &self.domain;
        let u = |rng: &mut ChaCha8Rng, (lo, hi): Range| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        NoiseParams {
            sigma_s: u(rng, d.sigma_s),
            sigma_c: u(rng, d.sigma_c),
            crf_gamma: u(rng, d.crf_gamma),
            seed: rng.random(),
        }
    }

    /// Synthesize a noisy/clean pair in this domain.
    pub fn synthesize<T: Scalar>(
        &self,
        clean_display: &Tensor<T>,
        params: &NoiseParams,
    ) -> NoisePair<T> {
        let field = if self.domain.spatially_varying {
            Some(level_modulation_field(clean_display.shape, params.seed ^ 0x5EED_F1E1D))
        } else {
            None
        };
        synthesize_pair(clean_display, params, field.as_ref())
    }
}

/// Two samplers over distinct parameter regimes, for transfer experiments.
pub fn make_domain_shift(
    source: NoiseDomain,
    target: NoiseDomain,
) -> Result<(DomainSampler, DomainSampler), DomainError> {
    Ok((DomainSampler::new(source)?, DomainSampler::new(target)?))
}

/// Smooth random field in [0.5, 1.5]: a coarse uniform grid blown up with
/// bilinear interpolation.
pub fn level_modulation_field<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 4usize;
    let coarse_shape = Shape::new(shape.n, grid, grid, shape.c);
    let coarse = Tensor::new(
        coarse_shape,
        (0..coarse_shape.len())
            .map(|_| T::from_f64(rng.random_range(0.5..1.5)).unwrap())
            .collect(),
    );
    let factor = shape.h.div_ceil(grid).max(shape.w.div_ceil(grid));
    let up = upsample_bilinear(&coarse, factor);
    let mut out = Tensor::zeros(shape);
    for n in 0..shape.n {
        for y in 0..shape.h {
            for x in 0..shape.w {
                for c in 0..shape.c {
                    out.set(n, y, x, c, up.at(n, y, x, c));
                }
            }
        }
    }
    out
}
