//! Distance-guided anomaly feature synthesis.
//!
//! Gaussian noise `g` is added to the adapted normal feature `u` with a
//! per-position scale `alpha = beta * (rho / mean(rho) - 1) + 1`, where
//! `rho = |g| / |u - p|` compares the noise norm with the residual norm to the
//! recomposed center `p`. Positions close to their center receive stronger
//! noise; `alpha` always has unit spatial mean.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CrasError, Result};
use crate::tensor::{FeatureMap, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: 0.015,
            beta: 0.3,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CrasError::Config(format!(
                "noise sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CrasError::Config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// `H x W` map of per-position Euclidean norms.
#[derive(Clone, Debug, PartialEq)]
pub struct NormMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> NormMap<T> {
    /// Norm of every position vector of `map`.
    pub fn of(map: &FeatureMap<T>) -> Self {
        let hw = map.spatial();
        let mut sq = vec![0.0f64; hw];
        for c in 0..map.channels() {
            for (s, &v) in sq.iter_mut().zip(map.plane(c)) {
                let v = v.f64();
                *s += v * v;
            }
        }
        NormMap {
            height: map.height(),
            width: map.width(),
            values: sq.into_iter().map(|s| T::of(s.sqrt())).collect(),
        }
    }
}

/// `r[h,w] = |u[h,w] - p[h,w]|_2`.
pub fn residual_norm_map<T: Real>(u: &FeatureMap<T>, p: &FeatureMap<T>) -> Result<NormMap<T>> {
    u.ensure_same_dims(p, "residual_norm_map")?;
    let hw = u.spatial();
    let mut sq = vec![0.0f64; hw];
    for c in 0..u.channels() {
        for ((s, &a), &b) in sq.iter_mut().zip(u.plane(c)).zip(p.plane(c)) {
            let d = a.f64() - b.f64();
            *s += d * d;
        }
    }
    Ok(NormMap {
        height: u.height(),
        width: u.width(),
        values: sq.into_iter().map(|s| T::of(s.sqrt())).collect(),
    })
}

/// Fills a map with i.i.d. `N(0, sigma^2)` values from `rng` using the
/// Box-Muller transform.
pub fn sample_noise_with<T: Real, R: Rng + ?Sized>(
    dims: (usize, usize, usize),
    sigma: f64,
    rng: &mut R,
) -> FeatureMap<T> {
    let (c, h, w) = dims;
    let n = c * h * w;
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        // 1 - U maps [0, 1) onto (0, 1] so the log stays finite
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        data.push(T::of(sigma * radius * angle.cos()));
        data.push(T::of(sigma * radius * angle.sin()));
    }
    data.truncate(n);
    FeatureMap::new(c, h, w, data).expect("noise dims nonzero")
}

pub fn sample_noise<T: Real>(dims: (usize, usize, usize), cfg: &NoiseConfig) -> Result<FeatureMap<T>> {
    cfg.validate()?;
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(shape_err("noise dims must be nonzero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(sample_noise_with(dims, cfg.sigma, &mut rng))
}

/// Seed for the noise of one sample at one optimizer step.
pub fn derive_seed(seed: u64, sample_id: &str, step: u64) -> u64 {
    // FNV-1a over the id, then a splitmix64 finalizer over the combination
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    seed ^ (z ^ (z >> 31))
}

/// Per-position noise scale together with the intermediate values needed to
/// differentiate it with respect to the residual norms.
#[derive(Clone, Debug)]
pub struct DistanceRatio<T> {
    pub alpha: Vec<T>,
    pub beta: T,
    /// `g / r` per position (after the zero-residual guard).
    ratios: Vec<T>,
    /// Residual norms actually used in the division.
    residuals: Vec<T>,
    mean_ratio: T,
    /// Positions whose residual was replaced by the smallest positive one.
    guarded: Vec<bool>,
    /// True when `alpha` was forced to 1 (all residuals zero or `beta = 0`).
    pub constant: bool,
}

impl<T: Real> DistanceRatio<T> {
    pub fn height_width(&self) -> usize {
        self.alpha.len()
    }

    /// Back-propagates `dL/dalpha` to `dL/dr`. Guarded positions receive no
    /// gradient.
    pub fn backprop(&self, d_alpha: &[T]) -> Vec<T> {
        let n = self.alpha.len();
        let mut dr = vec![T::zero(); n];
        if self.constant {
            return dr;
        }
        let inv_n = T::one() / T::of(n as f64);
        let m = self.mean_ratio;
        // dalpha_j/dr_k = -beta * rho_k / (r_k * m) * (delta_jk - rho_j / (n * m))
        let mut weighted = T::zero();
        for (&a, &rho) in d_alpha.iter().zip(&self.ratios) {
            weighted += a * rho;
        }
        let coupling = weighted * inv_n / m;
        for k in 0..n {
            if self.guarded[k] {
                continue;
            }
            let scale = -self.beta * self.ratios[k] / (self.residuals[k] * m);
            dr[k] = scale * (d_alpha[k] - coupling);
        }
        dr
    }
}

/// `alpha[h,w] = beta * (ratio[h,w] / mean(ratio) - 1) + 1` with
/// `ratio = g / r`.
pub fn distance_ratio_map<T: Real>(
    g_norms: &NormMap<T>,
    r_norms: &NormMap<T>,
    beta: f64,
) -> Result<DistanceRatio<T>> {
    if (g_norms.height, g_norms.width) != (r_norms.height, r_norms.width) {
        return Err(shape_err("noise and residual norm maps differ in size"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(CrasError::Config(format!("beta must be non-negative, got {beta}")));
    }
    let n = r_norms.values.len();
    let constant = |ratios: Vec<T>, residuals: Vec<T>, guarded: Vec<bool>| DistanceRatio {
        alpha: vec![T::one(); n],
        beta: T::of(beta),
        ratios,
        residuals,
        mean_ratio: T::one(),
        guarded,
        constant: true,
    };
    let min_positive = r_norms
        .values
        .iter()
        .copied()
        .filter(|&r| r > T::zero())
        .fold(None, |acc: Option<T>, r| Some(acc.map_or(r, |a| a.min(r))));
    let Some(floor) = min_positive else {
        static WARNED: AtomicBool = AtomicBool::new(false);
        if WARNED.swap(true, Ordering::Relaxed) {
            debug!("all residual norms are zero; synthesis falls back to unit scale");
        } else {
            warn!("all residual norms are zero; synthesis falls back to unit scale (reported once)");
        }
        return Ok(constant(vec![T::zero(); n], r_norms.values.clone(), vec![true; n]));
    };
    let guarded: Vec<bool> = r_norms.values.iter().map(|&r| r <= T::zero()).collect();
    let residuals: Vec<T> = r_norms
        .values
        .iter()
        .map(|&r| if r > T::zero() { r } else { floor })
        .collect();
    let ratios: Vec<T> = g_norms
        .values
        .iter()
        .zip(&residuals)
        .map(|(&g, &r)| g / r)
        .collect();
    if beta == 0.0 {
        return Ok(constant(ratios, residuals, guarded));
    }
    let mean = ratios.iter().copied().sum::<T>() / T::of(n as f64);
    if !(mean > T::zero()) || !mean.is_finite() {
        warn!("degenerate noise-to-residual ratios (mean {mean}); synthesis falls back to unit scale");
        return Ok(constant(ratios, residuals, guarded));
    }
    let b = T::of(beta);
    let alpha = ratios
        .iter()
        .map(|&rho| b * (rho / mean - T::one()) + T::one())
        .collect();
    Ok(DistanceRatio {
        alpha,
        beta: b,
        ratios,
        residuals,
        mean_ratio: mean,
        guarded,
        constant: false,
    })
}

/// `v = u + alpha (.) g`, with `alpha` broadcast over channels.
pub fn synthesize<T: Real>(u: &FeatureMap<T>, alpha: &[T], g: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    u.ensure_same_dims(g, "synthesize")?;
    let hw = u.spatial();
    if alpha.len() != hw {
        return Err(shape_err(format!(
            "alpha has {} positions, feature has {hw}",
            alpha.len()
        )));
    }
    let mut v = u.clone();
    for c in 0..u.channels() {
        let gp = g.plane(c);
        let vp = &mut v.as_mut_slice()[c * hw..(c + 1) * hw];
        for i in 0..hw {
            vp[i] += alpha[i] * gp[i];
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm_map(values: Vec<f64>) -> NormMap<f64> {
        NormMap {
            height: 1,
            width: values.len(),
            values,
        }
    }

    #[test]
    fn residual_norm_cases() {
        let u = FeatureMap::<f64>::from_fn(2, 1, 1, |c, _, _| [3.0, 4.0][c]);
        let p = FeatureMap::<f64>::zeros(2, 1, 1);
        assert_eq!(residual_norm_map(&u, &p).unwrap().values, vec![5.0]);
        assert!(residual_norm_map(&u, &u).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(residual_norm_map(&u, &FeatureMap::zeros(2, 1, 2)).is_err());
    }

    #[test]
    fn ratio_hand_example() {
        let g = norm_map(vec![1.0, 3.0]);
        let r = norm_map(vec![1.0, 1.0]);
        let a = distance_ratio_map(&g, &r, 0.3).unwrap();
        assert!((a.alpha[0] - 0.85).abs() < 1e-12);
        assert!((a.alpha[1] - 1.15).abs() < 1e-12);
    }

    #[test]
    fn ratio_constant_cases() {
        let g = norm_map(vec![0.5, 2.0, 1.0]);
        let r = norm_map(vec![0.25, 1.0, 0.5]);
        assert_eq!(distance_ratio_map(&g, &r, 0.0).unwrap().alpha, vec![1.0; 3]);
        for a in distance_ratio_map(&g, &r, 0.7).unwrap().alpha {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_guard() {
        let g = norm_map(vec![1.0, 1.0, 1.0]);
        let r = norm_map(vec![0.0, 0.5, 2.0]);
        let a = distance_ratio_map(&g, &r, 0.3).unwrap();
        assert_eq!(a.alpha[0], a.alpha[1]);
        assert!(a.alpha.iter().all(|v| v.is_finite()));

        let all_zero = distance_ratio_map(&g, &norm_map(vec![0.0; 3]), 0.3).unwrap();
        assert!(all_zero.constant);
        assert_eq!(all_zero.alpha, vec![1.0; 3]);
    }

    #[test]
    fn synthesize_cases() {
        let u = FeatureMap::<f64>::from_fn(2, 2, 2, |c, h, w| (c + 2 * h + 3 * w) as f64);
        let g = FeatureMap::<f64>::from_fn(2, 2, 2, |c, h, w| 0.1 * (c as f64 - h as f64 + w as f64));
        assert_eq!(synthesize(&u, &[0.3; 4], &FeatureMap::zeros(2, 2, 2)).unwrap(), u);
        let twice = synthesize(&FeatureMap::zeros(2, 2, 2), &[2.0; 4], &g).unwrap();
        assert_eq!(twice, g.map(|v| 2.0 * v));
        let alpha = [0.5, 1.0, 1.5, 2.0];
        let v = synthesize(&u, &alpha, &g).unwrap();
        for c in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let expected = u.get(c, h, w) + alpha[h * 2 + w] * g.get(c, h, w);
                    assert!((v.get(c, h, w) - expected).abs() < 1e-7);
                }
            }
        }
        assert!(synthesize(&u, &[1.0; 3], &g).is_err());
    }

    #[test]
    fn noise_is_seeded_and_validated() {
        let cfg = NoiseConfig { seed: 9, ..NoiseConfig::default() };
        let a: FeatureMap<f32> = sample_noise((3, 4, 5), &cfg).unwrap();
        let b: FeatureMap<f32> = sample_noise((3, 4, 5), &cfg).unwrap();
        assert_eq!(a, b);
        let zero = NoiseConfig { sigma: 0.0, ..cfg };
        assert!(sample_noise::<f32>((1, 1, 1), &zero).is_err());
    }

    #[test]
    fn noise_statistics() {
        let cfg = NoiseConfig { seed: 42, ..NoiseConfig::default() };
        let g: FeatureMap<f64> = sample_noise((1, 1000, 1000), &cfg).unwrap();
        let n = g.as_slice().len() as f64;
        let mean = g.as_slice().iter().sum::<f64>() / n;
        let var = g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var.sqrt() / 0.015 - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, "s0", 0);
        assert_ne!(a, derive_seed(1, "s0", 1));
        assert_ne!(a, derive_seed(1, "s1", 0));
        assert_eq!(a, derive_seed(1, "s0", 0));
    }
}
