//! Closed-form statistical distances between diagonal Gaussians, plus a
//! brute-force overlap oracle that verifies every closed form numerically.
//!
//! The central quantity is the Bhattacharyya coefficient `BC = ∫√(p·q)`,
//! computed in log domain:
//!
//! `ln BC = ¼·Σ ln vp + ¼·Σ ln vq − ½·Σ ln v̄ − ⅛·Σ (Δμ)²/v̄`,  `v̄ = (vp+vq)/2`
//!
//! Everything else derives from it: squared Hellinger distance `D_H² = 1 − BC`
//! and Bhattacharyya distance `D_B = −ln BC`. The convention `BC = 1 − D_H²`
//! (not `√(1 − D_H²)`) is used throughout; it is the one consistent with the
//! overlap-integral definition of `D_H²`.

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;
use rand_distr::StandardNormal;

/// Variance floor applied at construction; keeps determinants and divisions
/// away from zero.
pub const VAR_FLOOR: f64 = 1e-8;

/// Diagonal-covariance Gaussian over latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    /// Validates dimensions and positivity, then floors variances at
    /// [`VAR_FLOOR`].
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != var.len() {
            return Err(Error::contract(format!(
                "gaussian needs equal non-zero dims, got mean {} var {}",
                mean.len(),
                var.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("gaussian mean must be finite"));
        }
        if var.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::contract(
                "gaussian variance must be finite and positive",
            ));
        }
        let var = var.into_iter().map(|v| v.max(VAR_FLOOR)).collect();
        Ok(DiagGaussian { mean, var })
    }

    /// Standard normal `N(0, I_d)`.
    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }
}

/// Which distance a [`DistanceValue`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    HellingerSq,
    Hellinger,
    Bc,
    Bhattacharyya,
    Kl,
    Wasserstein2Sq,
    MahalanobisSq,
}

/// A computed distance; `saturated` marks values that hit a representable
/// limit (only possible for the unbounded kinds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceValue {
    pub kind: DistanceKind,
    pub value: f64,
    pub saturated: bool,
}

fn check_pair(p: &DiagGaussian, q: &DiagGaussian) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// `ln BC` in log domain; exact at `p = q` and immune to underflow.
pub(crate) fn ln_bc(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut ln_vp = 0.0;
    let mut ln_vq = 0.0;
    let mut ln_vbar = 0.0;
    let mut maha = 0.0;
    for i in 0..p.dim() {
        let (vp, vq) = (p.var[i], q.var[i]);
        let vbar = 0.5 * (vp + vq);
        let d = p.mean[i] - q.mean[i];
        ln_vp += vp.ln();
        ln_vq += vq.ln();
        ln_vbar += vbar.ln();
        maha += d * d / vbar;
    }
    0.25 * ln_vp + 0.25 * ln_vq - 0.5 * ln_vbar - 0.125 * maha
}

/// Squared Hellinger distance `D_H² = 1 − BC`, clamped into `[0, 1]`.
pub fn hellinger_sq(p: &DiagGaussian, q: &DiagGaussian) -> Result<DistanceValue> {
    check_pair(p, q)?;
    let v = (1.0 - ln_bc(p, q).exp()).clamp(0.0, 1.0);
    Ok(DistanceValue {
        kind: DistanceKind::HellingerSq,
        value: v,
        saturated: false,
    })
}

/// `D_H²` against the standard normal prior; same code path as
/// [`hellinger_sq`], specialized argument.
pub fn hellinger_sq_vs_standard(q: &DiagGaussian) -> Result<DistanceValue> {
    hellinger_sq(q, &DiagGaussian::standard(q.dim()))
}

/// Hellinger distance `D_H = √(D_H²)`.
pub fn hellinger(p: &DiagGaussian, q: &DiagGaussian) -> Result<DistanceValue> {
    let v = hellinger_sq(p, q)?.value.sqrt();
    Ok(DistanceValue {
        kind: DistanceKind::Hellinger,
        value: v,
        saturated: false,
    })
}

/// Bhattacharyya coefficient `BC = 1 − D_H²` in `[0, 1]`.
pub fn bhattacharyya_coeff(p: &DiagGaussian, q: &DiagGaussian) -> Result<DistanceValue> {
    check_pair(p, q)?;
    let v = ln_bc(p, q).exp().clamp(0.0, 1.0);
    Ok(DistanceValue {
        kind: DistanceKind::Bc,
        value: v,
        saturated: false,
    })
}

/// Bhattacharyya distance `D_B = −ln BC`, evaluated in log domain so a BC
/// that would underflow to zero still yields its finite log; `saturated`
/// flags the (then unreachable for valid inputs) infinite case.
pub fn bhattacharyya_dist(p: &DiagGaussian, q: &DiagGaussian) -> Result<DistanceValue> {
    check_pair(p, q)?;
    let v = -ln_bc(p, q);
    Ok(DistanceValue {
        kind: DistanceKind::Bhattacharyya,
        value: v,
        saturated: !v.is_finite(),
    })
}

/// `D_KL(q ‖ p)` for diagonal Gaussians. Argument order matches the
/// divergence notation: first argument is the distribution the expectation
/// is taken under.
pub fn kl_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<DistanceValue> {
    check_pair(q, p)?;
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let d = q.mean[i] - p.mean[i];
        acc += (p.var[i] / q.var[i]).ln() + (q.var[i] + d * d) / p.var[i] - 1.0;
    }
    Ok(DistanceValue {
        kind: DistanceKind::Kl,
        value: (0.5 * acc).max(0.0),
        saturated: false,
    })
}

/// Squared 2-Wasserstein distance `‖Δμ‖² + Σ (√vp − √vq)²`.
pub fn wasserstein2_sq(p: &DiagGaussian, q: &DiagGaussian) -> Result<DistanceValue> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let dm = p.mean[i] - q.mean[i];
        let ds = p.var[i].sqrt() - q.var[i].sqrt();
        acc += dm * dm + ds * ds;
    }
    Ok(DistanceValue {
        kind: DistanceKind::Wasserstein2Sq,
        value: acc,
        saturated: false,
    })
}

/// Squared Mahalanobis distance under the averaged covariance
/// `Σ̄ = (Σp + Σq)/2`.
pub fn mahalanobis_sq(p: &DiagGaussian, q: &DiagGaussian) -> Result<DistanceValue> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let d = p.mean[i] - q.mean[i];
        acc += d * d / (0.5 * (p.var[i] + q.var[i]));
    }
    Ok(DistanceValue {
        kind: DistanceKind::MahalanobisSq,
        value: acc,
        saturated: false,
    })
}

/// Brute-force estimator for the overlap integral `∫√(p·q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// Trapezoid rule on a 1-D grid spanning both means ± 12 combined
    /// standard deviations. Spectrally accurate for Gaussian-type
    /// integrands because the tails vanish at the endpoints.
    Quadrature1d,
    /// `E_{x∼p}[√(q(x)/p(x))]`, any dimension; density ratio evaluated in
    /// log domain.
    MonteCarlo,
}

fn ln_density_1d(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}

/// Estimates BC without using any closed form; the verification oracle for
/// this module.
pub fn oracle_bc(
    p: &DiagGaussian,
    q: &DiagGaussian,
    method: OracleMethod,
    budget: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(p, q)?;
    if budget == 0 {
        return Err(Error::contract("oracle budget must be positive"));
    }
    match method {
        OracleMethod::Quadrature1d => {
            if p.dim() != 1 {
                return Err(Error::contract("quadrature oracle requires dimension 1"));
            }
            if budget < 2 {
                return Err(Error::contract("quadrature needs at least 2 nodes"));
            }
            let spread = p.var[0].sqrt().max(q.var[0].sqrt());
            let lo = p.mean[0].min(q.mean[0]) - 12.0 * spread;
            let hi = p.mean[0].max(q.mean[0]) + 12.0 * spread;
            let h = (hi - lo) / (budget - 1) as f64;
            let f = |x: f64| {
                (0.5 * (ln_density_1d(x, p.mean[0], p.var[0])
                    + ln_density_1d(x, q.mean[0], q.var[0])))
                .exp()
            };
            let mut acc = 0.5 * (f(lo) + f(hi));
            for i in 1..budget - 1 {
                acc += f(lo + h * i as f64);
            }
            Ok(acc * h)
        }
        OracleMethod::MonteCarlo => {
            let mut rng = rng_from_seed(seed);
            let d = p.dim();
            let mut acc = 0.0;
            for _ in 0..budget {
                // One draw x ~ p, then √(q(x)/p(x)) in log domain.
                let mut ln_ratio = 0.0;
                for i in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    let x = p.mean[i] + p.var[i].sqrt() * z;
                    ln_ratio +=
                        ln_density_1d(x, q.mean[i], q.var[i]) - ln_density_1d(x, p.mean[i], p.var[i]);
                }
                acc += (0.5 * ln_ratio).exp();
            }
            Ok(acc / budget as f64)
        }
    }
}
