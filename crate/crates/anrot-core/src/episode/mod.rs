//! Episodic few-shot protocol: datasets, episode sampling, Gaussian class
//! prototypes, the composite loss, Hellinger-softmax classification, and
//! accuracy evaluation with confidence intervals.
//!
//! Classification probabilities come from support-set prototypes; the
//! contrastive similarity loss builds leave-one-out prototypes from the
//! query set, which keeps the two terms distinct. Both losses use mean
//! reduction so magnitudes do not scale with episode size.

mod archive;
mod synth;
pub(crate) mod tape;
mod train;

pub use archive::{load_dataset, save_dataset};
pub use synth::{make_synthetic, make_synthetic_split};
pub use train::{train, write_training_log, LogRow, TrainConfig, TrainReport};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{self, DiagGaussian};
use crate::net::{encode, ModelState};
use crate::parallel;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use crate::variational::PenaltyKind;
use crate::robust;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

/// A labeled image collection with a per-class record index.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
    split: Split,
}

impl Dataset {
    /// Validates records: equal `[C, H, W]` dims, values in `[0, 1]`.
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::contract(format!(
                "dataset needs equally many images and labels, got {} and {}",
                images.len(),
                labels.len()
            )));
        }
        let dims = images[0].shape().to_vec();
        if dims.len() != 3 {
            return Err(Error::contract(format!(
                "records must be [channels, height, width], got {dims:?}"
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != dims.as_slice() {
                return Err(Error::contract(format!(
                    "record {i} has shape {:?}, expected {dims:?}",
                    img.shape()
                )));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!(
                    "record {i} has values outside [0, 1]"
                )));
            }
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &label) in labels.iter().enumerate() {
            class_index.entry(label).or_default().push(i);
        }
        Ok(Dataset {
            images,
            labels,
            class_index,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn class_records(&self, class: usize) -> Result<&[usize]> {
        self.class_index
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("no class {class} in dataset")))
    }

    /// True when the two datasets share no class ids (the meta-split rule).
    pub fn class_disjoint(a: &Dataset, b: &Dataset) -> bool {
        a.class_index.keys().all(|c| !b.class_index.contains_key(c))
    }
}

/// One N-way episode with labels re-coded to `0..N-1`; `classes[recoded]`
/// recovers the original id.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support_images: Tensor,
    pub support_labels: Vec<usize>,
    pub query_images: Tensor,
    pub query_labels: Vec<usize>,
    pub classes: Vec<usize>,
    pub seed: u64,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

/// Takes `take` distinct elements via partial Fisher-Yates (explicit so the
/// draw order is pinned by this code, not a library internals).
fn sample_distinct<R: Rng>(rng: &mut R, pool: &mut [usize], take: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(take);
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

/// Uniform N-way-k-shot sampling with q queries per class, deterministic
/// under `seed`. Support and query index sets are disjoint by construction.
pub fn sample_episode(ds: &Dataset, n: usize, k: usize, q: usize, seed: u64) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::contract("episode needs n, k, q >= 1"));
    }
    let eligible: Vec<usize> = ds
        .class_index
        .iter()
        .filter(|(_, recs)| recs.len() >= k + q)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < n {
        return Err(Error::contract(format!(
            "need {n} classes with >= {} records, dataset offers {}",
            k + q,
            eligible.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut pool = eligible;
    let classes = sample_distinct(&mut rng, &mut pool, n);

    let mut support_refs = Vec::with_capacity(n * k);
    let mut query_refs = Vec::with_capacity(n * q);
    let mut support_labels = Vec::with_capacity(n * k);
    let mut query_labels = Vec::with_capacity(n * q);
    for (recoded, &class) in classes.iter().enumerate() {
        let mut records = ds.class_index[&class].clone();
        let picked = sample_distinct(&mut rng, &mut records, k + q);
        for &r in &picked[..k] {
            support_refs.push(&ds.images[r]);
            support_labels.push(recoded);
        }
        for &r in &picked[k..] {
            query_refs.push(&ds.images[r]);
            query_labels.push(recoded);
        }
    }
    Ok(Episode {
        support_images: Tensor::stack(&support_refs)?,
        support_labels,
        query_images: Tensor::stack(&query_refs)?,
        query_labels,
        classes,
        seed,
    })
}

/// A class prototype distribution in latent space.
#[derive(Debug, Clone)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub dist: DiagGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeMode {
    /// Mean of member means, mean of member variances.
    MeanVariance,
    /// Additionally adds the spread of member means to the variance.
    Pooled,
}

/// Aggregates member posteriors into one prototype distribution.
pub fn class_prototype(embeddings: &[DiagGaussian]) -> Result<DiagGaussian> {
    class_prototype_with_mode(embeddings, PrototypeMode::MeanVariance)
}

pub fn class_prototype_with_mode(
    embeddings: &[DiagGaussian],
    mode: PrototypeMode,
) -> Result<DiagGaussian> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::contract("prototype needs at least one member"))?;
    let d = first.dim();
    if embeddings.iter().any(|e| e.dim() != d) {
        return Err(Error::contract("prototype members must share dimension"));
    }
    let inv = 1.0 / embeddings.len() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for e in embeddings {
        for i in 0..d {
            mean[i] += e.mean()[i] * inv;
            var[i] += e.var()[i] * inv;
        }
    }
    if mode == PrototypeMode::Pooled {
        for e in embeddings {
            for i in 0..d {
                let dm = e.mean()[i] - mean[i];
                var[i] += dm * dm * inv;
            }
        }
    }
    DiagGaussian::new(mean, var)
}

/// `p_j = exp(-D_H^2(v, c_j)/tau) / sum_m exp(-D_H^2(v, c_m)/tau)`;
/// computed with a shifted log-sum-exp, sums to 1, strictly positive.
pub fn hellinger_softmax(
    v: &DiagGaussian,
    prototypes: &[ClassPrototype],
    temperature: f64,
) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::contract("softmax needs at least one prototype"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract("temperature must be finite and > 0"));
    }
    let mut logits = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        logits.push(-gauss::hellinger_sq(v, &p.dist)?.value / temperature);
    }
    Ok(stable_softmax(&logits))
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Mean categorical cross entropy plus how many rows hit the 1e-12 floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CceOutcome {
    pub value: f64,
    pub clamped_rows: usize,
}

const PROB_FLOOR: f64 = 1e-12;

/// `-(1/Q) sum_i ln p_i[y_i]` over probability rows.
pub fn cce_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<CceOutcome> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "cce needs equally many probability rows and labels, got {} and {}",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (row, &y) in probs.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::contract(format!(
                "label {y} out of range for {}-class probabilities",
                row.len()
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "probability row sums to {sum}, expected 1"
            )));
        }
        let p = row[y];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(CceOutcome {
        value: total / probs.len() as f64,
        clamped_rows: clamped,
    })
}

/// Mean contrastive similarity loss plus the count of skipped anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HesimOutcome {
    pub value: f64,
    pub skipped_anchors: usize,
}

/// Leave-one-out contrastive loss over query posteriors: each anchor is
/// scored against per-class prototypes built from the remaining queries;
/// anchors whose class has no other query are skipped (counted).
pub fn hesim_loss(
    queries: &[DiagGaussian],
    labels: &[usize],
    temperature: f64,
) -> Result<HesimOutcome> {
    if queries.is_empty() || queries.len() != labels.len() {
        return Err(Error::contract(
            "hesim needs equally many query embeddings and labels",
        ));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let class_order: Vec<usize> = groups.keys().copied().collect();

    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (i, (&y, v)) in labels.iter().zip(queries).enumerate() {
        if groups[&y].len() < 2 {
            skipped += 1;
            continue;
        }
        let mut protos = Vec::with_capacity(class_order.len());
        for &class in &class_order {
            let members: Vec<DiagGaussian> = groups[&class]
                .iter()
                .filter(|&&r| r != i)
                .map(|&r| queries[r].clone())
                .collect();
            protos.push(ClassPrototype {
                class_id: class,
                dist: class_prototype(&members)?,
            });
        }
        let target = class_order.iter().position(|&c| c == y).expect("member");
        let p = hellinger_softmax(v, &protos, temperature)?;
        total -= p[target].max(PROB_FLOOR).ln();
        used += 1;
    }
    Ok(HesimOutcome {
        value: if used > 0 { total / used as f64 } else { 0.0 },
        skipped_anchors: skipped,
    })
}

/// Mean absolute difference over all elements.
pub fn rec_loss(decoded: &Tensor, original: &Tensor) -> Result<f64> {
    if decoded.shape() != original.shape() {
        return Err(Error::contract(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            decoded.shape(),
            original.shape()
        )));
    }
    let n = decoded.numel() as f64;
    Ok(decoded
        .data()
        .iter()
        .zip(original.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Nearest prototype by Hellinger distance; ties go to the lowest class id.
pub fn predict(v: &DiagGaussian, prototypes: &[ClassPrototype]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for p in prototypes {
        let d = gauss::hellinger_sq(v, &p.dist)?.value;
        best = match best {
            None => Some((d, p.class_id)),
            Some((bd, bc)) if d < bd || (d == bd && p.class_id < bc) => Some((d, p.class_id)),
            other => other,
        };
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| Error::contract("predict needs at least one prototype"))
}

/// Loss weights of the composite objective `cce + l1*hesim + l2*rec +
/// l3*prior`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            lambda1,
            lambda2,
            lambda3,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 0.0,
        }
    }
}

/// Per-term values of one composite-loss evaluation. Terms are reported
/// unweighted; `total` applies the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cce: f64,
    pub hesim: f64,
    pub rec: f64,
    pub prior: f64,
    pub accuracy: f64,
    pub clamped_rows: usize,
    pub skipped_anchors: usize,
}

/// Evaluates the composite episode loss (temperature 1, deterministic
/// reconstruction from posterior means) without touching the parameters.
pub fn helanet_loss(
    episode: &Episode,
    state: &ModelState,
    weights: &LossWeights,
    penalty: &PenaltyKind,
) -> Result<LossBreakdown> {
    let spec = tape::EpisodeGraphSpec {
        support_x: &episode.support_images,
        support_y: &episode.support_labels,
        query_x: &episode.query_images,
        query_y: &episode.query_labels,
        n_classes: episode.n_way(),
        weights,
        penalty,
        temperature: 1.0,
        feat_offset: None,
        rec_noise: None,
        track_params: false,
        track_offset: false,
    };
    let eg = tape::build_episode_graph(state, &spec)?;
    Ok(eg.breakdown())
}

/// [`helanet_loss`] plus the reverse-mode gradient of `total` with respect
/// to every parameter, for custom training loops and gradient audits.
/// `rec_noise` (shape `[n_query, latent_dim]`) switches the reconstruction
/// to a reparameterized sample; `None` decodes the posterior means.
pub fn helanet_loss_grads(
    episode: &Episode,
    state: &ModelState,
    weights: &LossWeights,
    penalty: &PenaltyKind,
    temperature: f64,
    rec_noise: Option<&Tensor>,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let spec = tape::EpisodeGraphSpec {
        support_x: &episode.support_images,
        support_y: &episode.support_labels,
        query_x: &episode.query_images,
        query_y: &episode.query_labels,
        n_classes: episode.n_way(),
        weights,
        penalty,
        temperature,
        feat_offset: None,
        rec_noise,
        track_params: true,
        track_offset: false,
    };
    let eg = tape::build_episode_graph(state, &spec)?;
    let grads = eg.graph.backward(eg.total);
    let named = eg
        .param_vars
        .iter()
        .map(|(name, var)| {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(state.params()[name].shape().to_vec()));
            (name.clone(), g)
        })
        .collect();
    Ok((eg.breakdown(), named))
}

/// How query images are perturbed before evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryPerturb {
    None,
    /// Input-space sign attack against the clean support prototypes.
    Fgsm { epsilon: f64 },
    Gaussian { sigma: f64, seed: u64 },
}

/// Support prototypes from clean support embeddings, keyed by recoded label.
fn support_prototypes(state: &ModelState, episode: &Episode) -> Result<Vec<ClassPrototype>> {
    let enc = encode(state, &episode.support_images)?;
    let mut protos = Vec::with_capacity(episode.n_way());
    for class in 0..episode.n_way() {
        let members: Vec<DiagGaussian> = enc
            .iter()
            .zip(&episode.support_labels)
            .filter(|(_, &y)| y == class)
            .map(|(e, _)| e.posterior.clone())
            .collect();
        protos.push(ClassPrototype {
            class_id: class,
            dist: class_prototype(&members)?,
        });
    }
    Ok(protos)
}

/// Accuracy of one episode: clean support prototypes, queries optionally
/// perturbed, nearest-prototype prediction.
pub fn eval_episode(
    state: &ModelState,
    episode: &Episode,
    perturb: &QueryPerturb,
) -> Result<f64> {
    let protos = support_prototypes(state, episode)?;
    let queries = match *perturb {
        QueryPerturb::None => episode.query_images.clone(),
        QueryPerturb::Gaussian { sigma, seed } => {
            robust::gaussian_corrupt(&episode.query_images, sigma, seed)?
        }
        QueryPerturb::Fgsm { epsilon } => {
            let dists: Vec<DiagGaussian> = protos.iter().map(|p| p.dist.clone()).collect();
            robust::fgsm_input(
                &episode.query_images,
                &episode.query_labels,
                state,
                |st, x, y| tape::batch_cce_input_grad(st, x, y, Some(&dists), 1.0),
                epsilon,
            )?
        }
    };
    let enc = encode(state, &queries)?;
    let mut hits = 0usize;
    for (e, &y) in enc.iter().zip(&episode.query_labels) {
        if predict(&e.posterior, &protos)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / episode.query_labels.len() as f64)
}

/// Accuracy mean and half-width of the 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
}

/// Meta-test evaluation over independently seeded episodes. Episodes run in
/// parallel but accumulate in index order, so the report is identical for
/// any thread count.
pub fn evaluate(
    state: &ModelState,
    ds: &Dataset,
    n: usize,
    k: usize,
    q: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_perturbed(state, ds, n, k, q, episodes, seed, &QueryPerturb::None)
}

/// `evaluate` with a per-episode query perturbation (robustness sweeps).
/// Episode seeds depend only on (seed, index), never on the perturbation,
/// so a zero-strength sweep level reproduces the clean evaluation exactly.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_perturbed(
    state: &ModelState,
    ds: &Dataset,
    n: usize,
    k: usize,
    q: usize,
    episodes: usize,
    seed: u64,
    perturb: &QueryPerturb,
) -> Result<EvalReport> {
    if episodes < 2 {
        return Err(Error::contract("evaluation needs at least 2 episodes"));
    }
    let accs: Vec<Result<f64>> = parallel::map_indexed(episodes, |e| {
        let ep_seed = derive_seed(seed, e as u64);
        let episode = sample_episode(ds, n, k, q, ep_seed)?;
        let per_episode = match *perturb {
            QueryPerturb::Gaussian { sigma, .. } => QueryPerturb::Gaussian {
                sigma,
                seed: derive_seed(ep_seed, 7),
            },
            other => other,
        };
        eval_episode(state, &episode, &per_episode)
    });
    let accs: Vec<f64> = accs.into_iter().collect::<Result<Vec<_>>>()?;
    let n_ep = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n_ep;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n_ep - 1.0);
    Ok(EvalReport {
        accuracy: mean,
        ci95: 1.96 * var.sqrt() / n_ep.sqrt(),
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::hellinger_sq;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mean], vec![var]).unwrap()
    }

    fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
        // Constant-intensity 1x4x4 images, one gray level per class.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for r in 0..per_class {
                let v = (c as f64 + 0.1 * (r % 3) as f64) / classes as f64;
                images.push(Tensor::full(vec![1, 4, 4], v.min(1.0)));
                labels.push(c);
            }
        }
        Dataset::new(images, labels, Split::MetaTrain).unwrap()
    }

    #[test]
    fn dataset_validates_records() {
        let img = Tensor::full(vec![1, 4, 4], 0.5);
        assert!(Dataset::new(vec![img.clone()], vec![0, 1], Split::MetaTrain).is_err());
        let bad_range = Tensor::full(vec![1, 4, 4], 1.5);
        assert!(Dataset::new(vec![bad_range], vec![0], Split::MetaTrain).is_err());
        let other_shape = Tensor::full(vec![1, 4, 5], 0.5);
        assert!(Dataset::new(vec![img, other_shape], vec![0, 0], Split::MetaTrain).is_err());
    }

    #[test]
    fn class_disjointness_is_detected() {
        let a = toy_dataset(3, 2);
        let b = toy_dataset(2, 2);
        assert!(!Dataset::class_disjoint(&a, &b));
    }

    #[test]
    fn episode_sampling_is_deterministic_and_disjoint() {
        let ds = toy_dataset(6, 8);
        let e1 = sample_episode(&ds, 4, 2, 3, 99).unwrap();
        let e2 = sample_episode(&ds, 4, 2, 3, 99).unwrap();
        assert_eq!(e1.classes, e2.classes);
        assert_eq!(e1.support_images.data(), e2.support_images.data());
        assert_eq!(e1.query_labels, e2.query_labels);
        assert_eq!(e1.support_labels.len(), 8);
        assert_eq!(e1.query_labels.len(), 12);
        // Per-class counts are exact.
        for class in 0..4 {
            assert_eq!(e1.support_labels.iter().filter(|&&y| y == class).count(), 2);
            assert_eq!(e1.query_labels.iter().filter(|&&y| y == class).count(), 3);
        }
        let e3 = sample_episode(&ds, 4, 2, 3, 100).unwrap();
        assert!(
            e1.classes != e3.classes || e1.support_images.data() != e3.support_images.data(),
            "different seeds should give different episodes"
        );
    }

    #[test]
    fn episode_sampling_rejects_small_datasets() {
        let ds = toy_dataset(3, 4);
        assert!(sample_episode(&ds, 4, 2, 2, 0).is_err(), "too few classes");
        assert!(sample_episode(&ds, 3, 3, 2, 0).is_err(), "k+q too large");
        assert!(sample_episode(&ds, 3, 2, 2, 0).is_ok());
    }

    #[test]
    fn one_class_singleton_episode_is_exact() {
        let img = Tensor::full(vec![1, 2, 2], 0.3);
        let other = Tensor::full(vec![1, 2, 2], 0.6);
        let ds = Dataset::new(vec![img, other], vec![7, 7], Split::MetaTest).unwrap();
        let e = sample_episode(&ds, 1, 1, 1, 5).unwrap();
        assert_eq!(e.classes, vec![7]);
        assert_eq!(e.support_labels, vec![0]);
        assert_eq!(e.query_labels, vec![0]);
        // The two records are split between support and query.
        assert_ne!(e.support_images.data(), e.query_images.data());
    }

    #[test]
    fn class_appearance_is_uniform() {
        let ds = toy_dataset(8, 4);
        let episodes = 10_000usize;
        let n = 2;
        let mut counts = BTreeMap::new();
        for e in 0..episodes {
            let ep = sample_episode(&ds, n, 1, 1, derive_seed(3, e as u64)).unwrap();
            for c in ep.classes {
                *counts.entry(c).or_insert(0usize) += 1;
            }
        }
        // Each class appears with probability n/8 per episode.
        let expect = episodes as f64 * n as f64 / 8.0;
        let std = (episodes as f64 * (n as f64 / 8.0) * (1.0 - n as f64 / 8.0)).sqrt();
        for (&c, &cnt) in &counts {
            assert!(
                (cnt as f64 - expect).abs() < 3.0 * std,
                "class {c}: {cnt} vs {expect}"
            );
        }
    }

    #[test]
    fn prototype_matches_hand_cases() {
        let single = class_prototype(&[g1(0.7, 2.0)]).unwrap();
        assert_eq!(single.mean(), &[0.7]);
        assert_eq!(single.var(), &[2.0]);
        let two = class_prototype(&[g1(0.0, 1.0), g1(2.0, 1.0)]).unwrap();
        assert_eq!(two.mean(), &[1.0]);
        assert_eq!(two.var(), &[1.0]);
        assert!(class_prototype(&[]).is_err());
        assert!(class_prototype(&[g1(0.0, 1.0), DiagGaussian::standard(2)]).is_err());
    }

    #[test]
    fn prototype_matches_scalar_reference() {
        // Independent scalar-loop average over three random members.
        let members = [
            DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap(),
            DiagGaussian::new(vec![1.1, 0.4], vec![1.5, 0.25]).unwrap(),
            DiagGaussian::new(vec![-0.6, 2.2], vec![0.75, 1.0]).unwrap(),
        ];
        let p = class_prototype(&members).unwrap();
        for i in 0..2 {
            let mut m = 0.0;
            let mut v = 0.0;
            for e in &members {
                m += e.mean()[i];
                v += e.var()[i];
            }
            assert!((p.mean()[i] - m / 3.0).abs() < 1e-15);
            assert!((p.var()[i] - v / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pooled_prototype_adds_mean_spread() {
        let p = class_prototype_with_mode(
            &[g1(0.0, 1.0), g1(2.0, 1.0)],
            PrototypeMode::Pooled,
        )
        .unwrap();
        // Between-member spread: mean of (mu - 1)^2 = 1.
        assert_eq!(p.mean(), &[1.0]);
        assert_eq!(p.var(), &[2.0]);
    }

    #[test]
    fn softmax_matches_frozen_oracle() {
        // Two prototypes at squared distances 0 and 0.117503097415404550
        // (the frozen unit-shift value); softmax of (0, -d) at tau = 1.
        let v = g1(0.0, 1.0);
        let protos = vec![
            ClassPrototype {
                class_id: 0,
                dist: g1(0.0, 1.0),
            },
            ClassPrototype {
                class_id: 1,
                dist: g1(1.0, 1.0),
            },
        ];
        let p = hellinger_softmax(&v, &protos, 1.0).unwrap();
        assert!((p[0] - 0.529342021732974).abs() < 1e-12, "{}", p[0]);
        assert!((p[1] - 0.470657978267026).abs() < 1e-12, "{}", p[1]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);

        let single = hellinger_softmax(&v, &protos[..1], 1.0).unwrap();
        assert_eq!(single, vec![1.0]);
    }

    #[test]
    fn softmax_is_uniform_when_equidistant() {
        let v = g1(0.0, 1.0);
        let protos: Vec<ClassPrototype> = [(1.0, 3), (-1.0, 1), (1.0, 0)]
            .iter()
            .map(|&(m, id)| ClassPrototype {
                class_id: id,
                dist: g1(m, 1.0),
            })
            .collect();
        let p = hellinger_softmax(&v, &protos, 0.7).unwrap();
        for &pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(p.iter().all(|&pi| pi > 0.0));
    }

    #[test]
    fn cce_matches_hand_values() {
        let one_hot = cce_loss(&[vec![0.0, 1.0]], &[1]).unwrap();
        assert_eq!(one_hot.value, 0.0);
        assert_eq!(one_hot.clamped_rows, 0);
        let uniform = cce_loss(&[vec![0.2; 5]], &[3]).unwrap();
        assert!((uniform.value - 5.0f64.ln()).abs() < 1e-12);
        let half = cce_loss(&[vec![0.5, 0.5]], &[0]).unwrap();
        assert!((half.value - 2.0f64.ln()).abs() < 1e-12);
        // Zero probability at the label clamps and flags.
        let clamped = cce_loss(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert_eq!(clamped.clamped_rows, 1);
        assert!((clamped.value - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(cce_loss(&[vec![0.3, 0.3]], &[0]).is_err(), "rows must sum to 1");
        assert!(cce_loss(&[vec![0.5, 0.5]], &[2]).is_err(), "label in range");
    }

    #[test]
    fn hesim_matches_hand_cases() {
        // All queries identical: every leave-one-out softmax is uniform.
        let q = vec![g1(0.0, 1.0); 4];
        let labels = [0, 0, 1, 1];
        let out = hesim_loss(&q, &labels, 1.0).unwrap();
        assert!((out.value - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(out.skipped_anchors, 0);

        // Two tight classes two units apart: per-anchor loss is
        // ln(1 + exp(-(1 - e^{-1/2}))), frozen from hand evaluation.
        let q = vec![g1(0.0, 1.0), g1(0.0, 1.0), g1(2.0, 1.0), g1(2.0, 1.0)];
        let out = hesim_loss(&q, &labels, 1.0).unwrap();
        assert!((out.value - 0.5156412124258659).abs() < 1e-12, "{}", out.value);

        // One class: single-prototype softmax is 1 everywhere.
        let out = hesim_loss(&[g1(0.0, 1.0), g1(0.5, 1.0)], &[0, 0], 1.0).unwrap();
        assert_eq!(out.value, 0.0);

        // Singleton class anchors are skipped but still serve as prototypes.
        let q = vec![g1(0.0, 1.0), g1(0.1, 1.0), g1(5.0, 1.0)];
        let out = hesim_loss(&q, &[0, 0, 1], 1.0).unwrap();
        assert_eq!(out.skipped_anchors, 1);
        assert!(out.value > 0.0);
    }

    #[test]
    fn hesim_is_small_when_classes_are_far() {
        // Identical members per class, cross-class squared distance >= 0.9:
        // loss < ln(1 + (N-1) e^{-0.9}).
        let q = vec![
            g1(0.0, 0.01),
            g1(0.0, 0.01),
            g1(1.0, 0.01),
            g1(1.0, 0.01),
            g1(-1.0, 0.01),
            g1(-1.0, 0.01),
        ];
        let labels = [0, 0, 1, 1, 2, 2];
        for (a, b) in [(0usize, 2usize), (0, 4), (2, 4)] {
            let d = hellinger_sq(&q[a], &q[b]).unwrap().value;
            assert!(d >= 0.9, "construction: cross-class distance {d}");
        }
        let out = hesim_loss(&q, &labels, 1.0).unwrap();
        let bound = (1.0 + 2.0 * (-0.9f64).exp()).ln();
        assert!(out.value < bound, "{} vs {bound}", out.value);
    }

    #[test]
    fn rec_loss_matches_hand_values() {
        let a = Tensor::full(vec![1, 1, 2, 2], 0.5);
        assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
        let b = Tensor::full(vec![1, 1, 2, 2], 0.6);
        assert!((rec_loss(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        let c = Tensor::full(vec![1, 1, 4, 1], 0.6);
        assert!(rec_loss(&c, &a).is_err());
        // Scalar-loop reference on a random pair.
        let mut rng = rng_from_seed(4);
        let x: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let want = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 24.0;
        let xt = Tensor::new(vec![2, 3, 2, 2], x).unwrap();
        let yt = Tensor::new(vec![2, 3, 2, 2], y).unwrap();
        assert!((rec_loss(&xt, &yt).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn predict_is_argmin_and_tie_breaks_low() {
        let protos = vec![
            ClassPrototype {
                class_id: 3,
                dist: g1(1.0, 1.0),
            },
            ClassPrototype {
                class_id: 1,
                dist: g1(-1.0, 1.0),
            },
        ];
        // Equidistant: tie broken toward class 1.
        assert_eq!(predict(&g1(0.0, 1.0), &protos).unwrap(), 1);
        assert_eq!(predict(&g1(1.0, 1.0), &protos).unwrap(), 3);
        assert_eq!(predict(&g1(1.0, 1.0), &protos[..1]).unwrap(), 3);
        assert!(predict(&g1(0.0, 1.0), &[]).is_err());
    }

    #[test]
    fn predict_agrees_with_softmax_argmax() {
        let mut rng = rng_from_seed(12);
        for _ in 0..200 {
            let v = g1(rng.gen_range(-2.0..2.0), rng.gen_range(0.2..3.0));
            let protos: Vec<ClassPrototype> = (0..4)
                .map(|id| ClassPrototype {
                    class_id: id,
                    dist: g1(rng.gen_range(-2.0..2.0), rng.gen_range(0.2..3.0)),
                })
                .collect();
            let tau = rng.gen_range(0.1..3.0);
            let p = hellinger_softmax(&v, &protos, tau).unwrap();
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(predict(&v, &protos).unwrap(), protos[argmax].class_id);
        }
    }

    #[test]
    fn loss_weights_validate() {
        assert!(LossWeights::new(0.5, 1.0, 0.0).is_ok());
        assert!(LossWeights::new(-0.1, 1.0, 0.0).is_err());
        assert!(LossWeights::new(0.5, f64::NAN, 0.0).is_err());
        let d = LossWeights::default();
        assert_eq!((d.lambda1, d.lambda2, d.lambda3), (0.5, 1.0, 0.0));
    }

    #[test]
    fn loss_grads_agree_with_loss_and_fd() {
        use crate::net::{Arch, Backbone};
        use crate::rng::standard_normals;

        let arch = Arch {
            backbone: Backbone::Conv4Attn,
            in_channels: 1,
            height: 8,
            width: 8,
            widths: [4, 4, 4, 4],
            latent_dim: 4,
            reduction: 2,
            attention: true,
        };
        let state = ModelState::init(arch.clone(), 17).unwrap();
        let mut rng = rng_from_seed(33);
        let mut img = |n: usize| {
            let data = (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(vec![n, 1, 8, 8], data).unwrap()
        };
        let ep = Episode {
            support_images: img(4),
            support_labels: vec![0, 0, 1, 1],
            query_images: img(4),
            query_labels: vec![0, 1, 0, 1],
            classes: vec![0, 1],
            seed: 9,
        };
        let weights = LossWeights::new(0.5, 1.0, 0.25).unwrap();
        let penalty = PenaltyKind::default();

        // At temperature 1 with deterministic reconstruction, the value side
        // is bitwise identical to the plain loss evaluation.
        let (bd, grads) =
            helanet_loss_grads(&ep, &state, &weights, &penalty, 1.0, None).unwrap();
        let plain = helanet_loss(&ep, &state, &weights, &penalty).unwrap();
        assert_eq!(bd, plain);

        // The gradient map is total over the parameter catalog.
        let names: Vec<&String> = state.params().keys().collect();
        assert_eq!(grads.len(), names.len());
        for name in &names {
            assert_eq!(
                grads[*name].shape(),
                state.params()[*name].shape(),
                "shape of {name}"
            );
        }

        // Spot-check one coordinate per parameter against central
        // differences through the same public entry point.
        let noise = Tensor::new(vec![4, 4], standard_normals(&mut rng, 16)).unwrap();
        let (_, g) =
            helanet_loss_grads(&ep, &state, &weights, &penalty, 0.7, Some(&noise)).unwrap();
        let h = 1e-5;
        for name in &names {
            let idx = state.params()[*name].data().len() / 2;
            let eval_at = |delta: f64| {
                let mut params = state.params().clone();
                let t = params.get_mut(*name).unwrap();
                let mut data = t.data().to_vec();
                data[idx] += delta;
                *t = Tensor::new(t.shape().to_vec(), data).unwrap();
                let st = ModelState::from_params(arch.clone(), params).unwrap();
                helanet_loss_grads(&ep, &st, &weights, &penalty, 0.7, Some(&noise))
                    .unwrap()
                    .0
                    .total
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let got = g[*name].data()[idx];
            let scale = fd.abs().max(got.abs()).max(1.0);
            assert!(
                (fd - got).abs() / scale < 1e-5,
                "{name}[{idx}]: fd {fd} vs grad {got}"
            );
        }
    }
}
