//! Seeded synthetic image classes: each class is a fixed smooth pattern of
//! Gaussian bumps, rendered with optional pixel noise. High separation and
//! low noise make the classes linearly separable by construction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normals};
use crate::tensor::Tensor;

use super::{Dataset, Split};

const BUMPS: usize = 3;

/// The noiseless pattern of one class channel, min-max normalized to
/// `[0, 1]`, deterministic in the seed.
fn class_pattern(seed: u64, height: usize, width: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let scale = height.min(width) as f64;
    let mut bumps = Vec::with_capacity(BUMPS);
    for _ in 0..BUMPS {
        let ch = rng.gen_range(0.0..1.0) * (height as f64 - 1.0);
        let cw = rng.gen_range(0.0..1.0) * (width as f64 - 1.0);
        let amp = rng.gen_range(0.5..1.0);
        let radius = rng.gen_range(0.15..0.35) * scale;
        bumps.push((ch, cw, amp, radius));
    }
    let mut out = Vec::with_capacity(height * width);
    for h in 0..height {
        for w in 0..width {
            let mut v = 0.0;
            for &(ch, cw, amp, radius) in &bumps {
                let dh = h as f64 - ch;
                let dw = w as f64 - cw;
                v += amp * (-(dh * dh + dw * dw) / (2.0 * radius * radius)).exp();
            }
            out.push(v);
        }
    }
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; height * width];
    }
    for v in &mut out {
        *v = (*v - lo) / (hi - lo);
    }
    out
}

fn validate_knobs(separation: f64, noise: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&separation) {
        return Err(Error::contract(format!(
            "separation must lie in [0, 1], got {separation}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::contract(format!(
            "noise must be finite and >= 0, got {noise}"
        )));
    }
    Ok(())
}

/// Renders one dataset whose class ids are `class_ids`. Patterns depend only
/// on `(seed, class id)`, so the same id renders the same pattern in any
/// split; disjoint id ranges give class-disjoint splits.
fn render(
    class_ids: &[usize],
    per_class: usize,
    dims: (usize, usize, usize),
    separation: f64,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let (c, h, w) = dims;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::contract(format!("image dims must be positive, got {dims:?}")));
    }
    if per_class == 0 {
        return Err(Error::contract("per_class must be >= 1"));
    }
    let pattern_master = derive_seed(seed, 1);
    let noise_master = derive_seed(seed, 2);

    let mut images = Vec::with_capacity(class_ids.len() * per_class);
    let mut labels = Vec::with_capacity(class_ids.len() * per_class);
    for &class in class_ids {
        let mut pattern = Vec::with_capacity(c * h * w);
        for channel in 0..c {
            let ps = derive_seed(pattern_master, (class as u64) * 4096 + channel as u64);
            pattern.extend(class_pattern(ps, h, w));
        }
        for rec in 0..per_class {
            let rec_seed = derive_seed(noise_master, (class as u64) * 1_000_003 + rec as u64);
            let mut rng = rng_from_seed(rec_seed);
            let eta = standard_normals(&mut rng, c * h * w);
            let data: Vec<f64> = pattern
                .iter()
                .zip(&eta)
                .map(|(&p, &e)| (0.5 + separation * (p - 0.5) + noise * e).clamp(0.0, 1.0))
                .collect();
            images.push(Tensor::new(vec![c, h, w], data)?);
            labels.push(class);
        }
    }
    Dataset::new(images, labels, split)
}

/// Synthetic dataset of `classes` bump-pattern classes, `per_class` records
/// each. `separation` in `[0, 1]` scales inter-pattern contrast; `noise` is
/// the pixel noise std.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    dims: (usize, usize, usize),
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::contract("need at least 2 classes"));
    }
    validate_knobs(separation, noise)?;
    let ids: Vec<usize> = (0..classes).collect();
    render(&ids, per_class, dims, separation, noise, seed, Split::MetaTrain)
}

/// Class-disjoint meta-train / meta-val / meta-test datasets drawn from one
/// pattern family: split `i` owns a contiguous range of class ids.
pub fn make_synthetic_split(
    classes: [usize; 3],
    per_class: usize,
    dims: (usize, usize, usize),
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if classes.iter().any(|&n| n < 2) {
        return Err(Error::contract(
            "each split needs at least 2 classes for episodic sampling",
        ));
    }
    validate_knobs(separation, noise)?;
    let splits = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];
    let mut start = 0usize;
    let mut out = Vec::with_capacity(3);
    for (n, split) in classes.into_iter().zip(splits) {
        let ids: Vec<usize> = (start..start + n).collect();
        out.push(render(&ids, per_class, dims, separation, noise, seed, split)?);
        start += n;
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok((train, val, test))
}
