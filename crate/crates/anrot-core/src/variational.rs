//! Reparameterized sampling and the three prior penalties (Hellinger, KL,
//! Wasserstein) between a posterior and the standard normal.
//!
//! The Hellinger penalty is the trainable consequence of rewriting the ELBO
//! divergence term as `log(1 − D_H²)²`: minimizing `−2·ln(1 − D_H²)` pulls
//! the posterior toward the prior. Since `1 − D_H² = BC`, the penalty is
//! evaluated as `−2·ln BC` in log domain, which is exactly zero at the prior
//! and never needs the unstable `ln(1 − x)` form.

use crate::error::{Error, Result};
use crate::gauss::{self, DiagGaussian};
use crate::graph::{Graph, Var};

/// A draw from a posterior via `z = μ + √var ⊙ ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub source: DiagGaussian,
    pub noise: Vec<f64>,
}

/// Prior-penalty family for the reconstruction objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyFamily {
    HellingerElbo,
    KlElbo,
    WassersteinElbo,
}

/// Family plus its weight; the weight scales the dispatched penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyKind {
    pub family: PenaltyFamily,
    pub lambda: f64,
}

impl PenaltyKind {
    pub fn new(family: PenaltyFamily, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::contract("penalty lambda must be finite and >= 0"));
        }
        Ok(PenaltyKind { family, lambda })
    }
}

impl Default for PenaltyKind {
    fn default() -> Self {
        PenaltyKind {
            family: PenaltyFamily::HellingerElbo,
            lambda: 1.0,
        }
    }
}

/// Penalty result; `saturated` marks a value that reached +infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub saturated: bool,
}

/// `z = μ + √var ⊙ ζ`, elementwise, exactly those operations.
pub fn reparameterize(q: &DiagGaussian, noise: &[f64]) -> Result<LatentSample> {
    if noise.len() != q.dim() {
        return Err(Error::contract(format!(
            "noise dimension {} does not match gaussian dimension {}",
            noise.len(),
            q.dim()
        )));
    }
    let z = q
        .mean()
        .iter()
        .zip(q.var())
        .zip(noise)
        .map(|((&m, &v), &n)| m + v.sqrt() * n)
        .collect();
    Ok(LatentSample {
        z,
        source: q.clone(),
        noise: noise.to_vec(),
    })
}

/// `−2·ln(1 − D_H²(q, N(0,I))) = −2·ln BC`, always ≥ 0, zero iff q is the
/// prior.
pub fn hellinger_elbo_penalty(q: &DiagGaussian) -> Result<PenaltyValue> {
    let std = DiagGaussian::standard(q.dim());
    let v = -2.0 * gauss::ln_bc(q, &std);
    Ok(PenaltyValue {
        value: v.max(0.0),
        saturated: !v.is_finite(),
    })
}

/// `D_KL(q ‖ N(0,I))`.
pub fn kl_elbo_penalty(q: &DiagGaussian) -> Result<f64> {
    Ok(gauss::kl_gaussian(q, &DiagGaussian::standard(q.dim()))?.value)
}

/// `λ · W₂²(q, N(0,I))`.
pub fn wasserstein_elbo_penalty(q: &DiagGaussian, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract("penalty lambda must be finite and >= 0"));
    }
    Ok(lambda * gauss::wasserstein2_sq(q, &DiagGaussian::standard(q.dim()))?.value)
}

/// Dispatches to one of the three penalties; `kind.lambda` scales every
/// family uniformly so the three are comparable under one weight knob.
pub fn penalty(q: &DiagGaussian, kind: &PenaltyKind) -> Result<PenaltyValue> {
    let base = match kind.family {
        PenaltyFamily::HellingerElbo => return scaled(hellinger_elbo_penalty(q)?, kind.lambda),
        PenaltyFamily::KlElbo => kl_elbo_penalty(q)?,
        PenaltyFamily::WassersteinElbo => wasserstein_elbo_penalty(q, 1.0)?,
    };
    Ok(PenaltyValue {
        value: kind.lambda * base,
        saturated: false,
    })
}

fn scaled(p: PenaltyValue, lambda: f64) -> Result<PenaltyValue> {
    Ok(PenaltyValue {
        value: lambda * p.value,
        saturated: p.saturated,
    })
}

/// Tape version: per-row prior penalty for a batch of posteriors given as
/// `mu`, `var` matrices of shape `[n, d]`. Returns the `[n]` vector of
/// penalties (unscaled by any lambda).
///
/// Matches the pure functions above term for term so values and gradients
/// agree with the closed forms.
pub(crate) fn penalty_rows_on_graph(
    g: &mut Graph,
    mu: Var,
    var: Var,
    family: PenaltyFamily,
) -> Var {
    match family {
        PenaltyFamily::HellingerElbo => {
            // -2 ln BC(q, N(0,I)) = -1/2 Σ ln v + Σ ln v̄ + 1/4 Σ μ²/v̄,
            // with v̄ = (v+1)/2.
            let vbar = {
                let t = g.add_scalar(var, 1.0);
                g.mul_scalar(t, 0.5)
            };
            let ln_v = g.ln(var);
            let a = g.row_sum(ln_v);
            let ln_vbar = g.ln(vbar);
            let b = g.row_sum(ln_vbar);
            let mu2 = g.mul(mu, mu);
            let ratio = g.div(mu2, vbar);
            let c = g.row_sum(ratio);
            let term_a = g.mul_scalar(a, -0.5);
            let term_c = g.mul_scalar(c, 0.25);
            let ab = g.add(term_a, b);
            g.add(ab, term_c)
        }
        PenaltyFamily::KlElbo => {
            // 1/2 Σ (v + μ² − ln v − 1).
            let mu2 = g.mul(mu, mu);
            let s = g.add(var, mu2);
            let ln_v = g.ln(var);
            let s = g.sub(s, ln_v);
            let s = g.add_scalar(s, -1.0);
            let rows = g.row_sum(s);
            g.mul_scalar(rows, 0.5)
        }
        PenaltyFamily::WassersteinElbo => {
            // Σ (√v − 1)² + μ².
            let sd = g.sqrt(var);
            let sd1 = g.add_scalar(sd, -1.0);
            let sd2 = g.mul(sd1, sd1);
            let mu2 = g.mul(mu, mu);
            let s = g.add(sd2, mu2);
            g.row_sum(s)
        }
    }
}
