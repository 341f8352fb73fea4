//! Random smooth periodic fields from a truncated Fourier series with a
//! Gaussian spectrum.
//!
//! Mode `k` (angular wavenumber `2 pi |k|`) gets variance proportional to
//! `exp(-(2 pi |k| l)^2)`; weights are normalised so the pointwise variance
//! of the field is exactly 1. Modes whose weight drops below `1e-16` of the
//! constant mode are dropped.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WEIGHT_FLOOR: f64 = 1e-16;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

fn spectrum(k2: f64, length_scale: f64) -> f64 {
    (-(TWO_PI * length_scale).powi(2) * k2).exp()
}

/// `f(x) = sum_k a_k (xi_k cos(2 pi k x) + eta_k sin(2 pi k x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField1d {
    /// `(cos, sin)` coefficient per mode `k = 0, 1, ...`.
    pub coeffs: Vec<(f64, f64)>,
}

impl SmoothField1d {
    /// Modes `0..=max_mode` at most.
    pub fn new(length_scale: f64, max_mode: usize, rng: &mut impl Rng) -> Result<Self> {
        if !(length_scale > 0.0) {
            return Err(Error::Contract("length_scale must be positive".into()));
        }
        let mut w = Vec::new();
        for k in 0..=max_mode {
            let wk = spectrum((k * k) as f64, length_scale);
            if wk < WEIGHT_FLOOR {
                break;
            }
            w.push(wk);
        }
        let total: f64 = w.iter().sum();
        let coeffs = w
            .iter()
            .enumerate()
            .map(|(k, &wk)| {
                let a = (wk / total).sqrt();
                let xi: f64 = rng.sample(StandardNormal);
                let eta: f64 = rng.sample(StandardNormal);
                // The constant mode has no sine partner, so its cosine carries
                // the full weight.
                if k == 0 {
                    (a * xi, 0.0)
                } else {
                    (a * xi, a * eta)
                }
            })
            .collect();
        Ok(Self { coeffs })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, &(c, s))| {
                let arg = TWO_PI * k as f64 * x;
                c * arg.cos() + s * arg.sin()
            })
            .sum()
    }

    pub fn max_mode(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }
}

/// Sum over wave vectors `(kx, ky)` in a half plane, `|k|` up to `max_mode`
/// per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothField2d {
    /// `(kx, ky, cos coefficient, sin coefficient)`.
    pub modes: Vec<(i64, i64, f64, f64)>,
}

impl SmoothField2d {
    pub fn new(length_scale: f64, max_mode: usize, rng: &mut impl Rng) -> Result<Self> {
        if !(length_scale > 0.0) {
            return Err(Error::Contract("length_scale must be positive".into()));
        }
        let k = max_mode as i64;
        let mut raw = Vec::new();
        for kx in 0..=k {
            for ky in -k..=k {
                // Half plane: (kx, ky) and (-kx, -ky) are the same mode.
                if kx == 0 && ky < 0 {
                    continue;
                }
                let wk = spectrum((kx * kx + ky * ky) as f64, length_scale);
                if wk >= WEIGHT_FLOOR {
                    raw.push((kx, ky, wk));
                }
            }
        }
        let total: f64 = raw.iter().map(|m| m.2).sum();
        let modes = raw
            .into_iter()
            .map(|(kx, ky, wk)| {
                let a = (wk / total).sqrt();
                let xi: f64 = rng.sample(StandardNormal);
                let eta: f64 = rng.sample(StandardNormal);
                if kx == 0 && ky == 0 {
                    (kx, ky, a * xi, 0.0)
                } else {
                    (kx, ky, a * xi, a * eta)
                }
            })
            .collect();
        Ok(Self { modes })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.modes
            .iter()
            .map(|&(kx, ky, c, s)| {
                let arg = TWO_PI * (kx as f64 * x + ky as f64 * y);
                c * arg.cos() + s * arg.sin()
            })
            .sum()
    }
}

/// Default mode cap: enough for any length scale used at desk resolution.
pub const DEFAULT_MAX_MODE: usize = 64;

/// 1-d field sampled on the periodic grid `x_i = i / n`, shape `[n]`.
pub fn sample_smooth_field(n: usize, length_scale: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = SmoothField1d::new(length_scale, DEFAULT_MAX_MODE, &mut rng)?;
    Tensor::from_vec(&[n], (0..n).map(|i| f.eval(i as f64 / n as f64)).collect())
}

/// 2-d field sampled on `x_i = i / n, y_j = j / n`, shape `[n, n]`.
pub fn sample_smooth_field_2d(n: usize, length_scale: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = SmoothField2d::new(length_scale, 16, &mut rng)?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(f.eval(i as f64 / n as f64, j as f64 / n as f64));
        }
    }
    Tensor::from_vec(&[n, n], data)
}
