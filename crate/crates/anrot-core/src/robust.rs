//! Robustness augmentation: single-step sign-method adversaries (input or
//! feature space) and Gaussian pixel noise, plus deterministic assembly of
//! mixed clean / adversarial / noisy batches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::tape::batch_cce_input_grad;
use crate::error::{Error, Result};
use crate::net::ModelState;
use crate::rng::{derive_seed, rng_from_seed, standard_normals};
use crate::tensor::Tensor;

/// Where the sign perturbation is applied during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FgsmSpace {
    /// Perturb pixels; results stay clamped to `[0, 1]`.
    Input,
    /// Perturb the final feature map; no clamp, the range is unconstrained.
    Feature,
}

/// Mixed-batch augmentation settings. `mix` is the clean / adversarial /
/// Gaussian proportion and must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub epsilon: f64,
    pub sigma: f64,
    pub mix: [f64; 3],
    pub space: FgsmSpace,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            epsilon: 0.05,
            sigma: 0.05,
            mix: [1.0 / 3.0; 3],
            space: FgsmSpace::Feature,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::contract(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::contract(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.mix.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::contract("mix proportions must be finite and >= 0"));
        }
        let sum: f64 = self.mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "mix proportions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Which augmentation a batch row received.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Clean,
    Adversarial,
    Gaussian,
}

/// An augmented batch. Row order and labels match the source batch; for
/// feature-space attacks the adversarial rows are tagged here but perturbed
/// later, where the feature map exists.
#[derive(Debug, Clone)]
pub struct RobustBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl RobustBatch {
    pub fn rows_with(&self, v: Variant) -> Vec<usize> {
        self.variants
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == v)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits `n` rows into clean / adversarial / Gaussian counts by largest
/// remainder; remainder ties resolve in that order.
pub fn mix_counts(n: usize, mix: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = mix.iter().map(|m| m * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Stable sort keeps the clean > adversarial > Gaussian tie preference.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders")
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % 3]] += 1;
    }
    counts
}

fn sign(v: f64) -> f64 {
    // f64::signum maps 0.0 to 1.0; the attack must leave flat coordinates
    // untouched.
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-step input-space sign attack: `clamp(x + epsilon * sign(g), 0, 1)`
/// where `g` is the gradient of `loss_grad`'s loss w.r.t. the pixels.
pub fn fgsm_input<F>(
    x: &Tensor,
    y: &[usize],
    state: &ModelState,
    loss_grad: F,
    epsilon: f64,
) -> Result<Tensor>
where
    F: FnOnce(&ModelState, &Tensor, &[usize]) -> Result<(f64, Tensor)>,
{
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::contract(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    let (loss, grad) = loss_grad(state, x, y)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("attack loss is non-finite: {loss}")));
    }
    if grad.shape() != x.shape() {
        return Err(Error::contract(format!(
            "loss gradient has shape {:?}, input has {:?}",
            grad.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| (v + epsilon * sign(g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Feature-space sign offsets: zeros except on the listed leading-axis rows,
/// which get `epsilon * sign(grad)`. No clamp; feature values are free.
pub fn fgsm_feature(grad: &Tensor, rows: &[usize], epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::contract(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    if grad.shape().is_empty() {
        return Err(Error::contract("feature gradient must have a leading axis"));
    }
    let b = grad.shape()[0];
    let slab = grad.numel() / b.max(1);
    let mut data = vec![0.0; grad.numel()];
    for &r in rows {
        if r >= b {
            return Err(Error::contract(format!("row {r} out of {b} batch rows")));
        }
        for i in 0..slab {
            data[r * slab + i] = epsilon * sign(grad.data()[r * slab + i]);
        }
    }
    Tensor::new(grad.shape().to_vec(), data)
}

/// Adds `N(0, sigma^2)` pixel noise and clamps back to `[0, 1]`. Each
/// leading-axis row draws from its own derived stream, so a row's noise does
/// not depend on how many rows are corrupted.
pub fn gaussian_corrupt(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if x.shape().is_empty() {
        return Err(Error::contract("noise input must have a leading axis"));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let b = x.shape()[0];
    let slab = x.numel() / b.max(1);
    let mut data = Vec::with_capacity(x.numel());
    for r in 0..b {
        let mut rng = rng_from_seed(derive_seed(seed, 2000 + r as u64));
        let noise = standard_normals(&mut rng, slab);
        for i in 0..slab {
            data.push((x.data()[r * slab + i] + sigma * noise[i]).clamp(0.0, 1.0));
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Builds a mixed robust batch: same rows and labels, each row assigned one
/// variant by a seeded shuffle. Input-space adversarial rows are perturbed
/// against prototypes built from the batch itself; feature-space rows are
/// only tagged (the sign step happens on the feature map during training).
pub fn robust_batch(
    state: &ModelState,
    x: &Tensor,
    y: &[usize],
    config: &RobustConfig,
    seed: u64,
) -> Result<RobustBatch> {
    config.validate()?;
    let b = x.shape().first().copied().unwrap_or(0);
    if b == 0 || b != y.len() {
        return Err(Error::contract(format!(
            "batch has {b} rows but {} labels",
            y.len()
        )));
    }

    let counts = mix_counts(b, &config.mix);
    let mut order: Vec<usize> = (0..b).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 0));
    for i in (1..b).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut variants = vec![Variant::Clean; b];
    for (pos, &row) in order.iter().enumerate() {
        variants[row] = if pos < counts[0] {
            Variant::Clean
        } else if pos < counts[0] + counts[1] {
            Variant::Adversarial
        } else {
            Variant::Gaussian
        };
    }

    let slab = x.numel() / b;
    let mut data = x.data().to_vec();

    let adv_rows: Vec<usize> = (0..b).filter(|&r| variants[r] == Variant::Adversarial).collect();
    if !adv_rows.is_empty() && config.space == FgsmSpace::Input && config.epsilon > 0.0 {
        let (_, grad) = batch_cce_input_grad(state, x, y, None, 1.0)?;
        for &r in &adv_rows {
            for i in 0..slab {
                let k = r * slab + i;
                data[k] = (data[k] + config.epsilon * sign(grad.data()[k])).clamp(0.0, 1.0);
            }
        }
    }

    if config.sigma > 0.0 {
        for r in 0..b {
            if variants[r] != Variant::Gaussian {
                continue;
            }
            let mut row_rng = rng_from_seed(derive_seed(seed, 2000 + r as u64));
            let noise = standard_normals(&mut row_rng, slab);
            for i in 0..slab {
                let k = r * slab + i;
                data[k] = (data[k] + config.sigma * noise[i]).clamp(0.0, 1.0);
            }
        }
    }

    Ok(RobustBatch {
        images: Tensor::new(x.shape().to_vec(), data)?,
        labels: y.to_vec(),
        variants,
    })
}
