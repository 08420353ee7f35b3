//! Differentiable episode losses on the autodiff tape.
//!
//! These builders mirror the pure-value operations in the parent module;
//! consistency between the two paths is pinned by tests. The softmax terms
//! use a constant-shift log-sum-exp, which is exact (the shift is a
//! constant, so values and gradients are unchanged) and saturation-free.


use crate::error::{Error, Result};
use crate::gauss::DiagGaussian;
use crate::graph::{Graph, Var};
use crate::net::{bind_params, check_taps, decoder_graph, encoder_graph, ModelState};
use crate::tensor::Tensor;
use crate::variational::{penalty_rows_on_graph, PenaltyKind};

use super::{LossBreakdown, LossWeights, PROB_FLOOR};

/// A diagonal Gaussian as two rank-1 `[d]` nodes.
pub(crate) struct RowDist {
    pub mu: Var,
    pub var: Var,
}

pub(crate) fn row_dist(g: &mut Graph, mu: Var, var: Var, i: usize) -> RowDist {
    RowDist {
        mu: g.row(mu, i),
        var: g.row(var, i),
    }
}

pub(crate) fn const_dist(g: &mut Graph, q: &DiagGaussian) -> RowDist {
    let mu = Tensor::new(vec![q.dim()], q.mean().to_vec()).expect("sized");
    let var = Tensor::new(vec![q.dim()], q.var().to_vec()).expect("sized");
    RowDist {
        mu: g.constant(mu),
        var: g.constant(var),
    }
}

/// Prototype distribution of the listed rows: mean of means, mean of
/// variances.
pub(crate) fn proto_dist(g: &mut Graph, mu: Var, var: Var, rows: &[usize]) -> RowDist {
    RowDist {
        mu: g.mean_rows(mu, rows),
        var: g.mean_rows(var, rows),
    }
}

/// Squared Hellinger distance between two diagonal Gaussians, as a scalar
/// node: `1 - exp(ln BC)` with the log-domain Bhattacharyya coefficient.
pub(crate) fn hellinger_sq_dist(g: &mut Graph, a: &RowDist, b: &RowDist) -> Var {
    let va_ln = g.ln(a.var);
    let vb_ln = g.ln(b.var);
    let vsum = g.add(a.var, b.var);
    let vbar = g.mul_scalar(vsum, 0.5);
    let vbar_ln = g.ln(vbar);
    let la = g.sum(va_ln);
    let lb = g.sum(vb_ln);
    let lbar = g.sum(vbar_ln);
    let dmu = g.sub(a.mu, b.mu);
    let dsq = g.mul(dmu, dmu);
    let ratio = g.div(dsq, vbar);
    let quad = g.sum(ratio);
    let t1 = g.mul_scalar(la, 0.25);
    let t2 = g.mul_scalar(lb, 0.25);
    let t3 = g.mul_scalar(lbar, -0.5);
    let t4 = g.mul_scalar(quad, -0.125);
    let s1 = g.add(t1, t2);
    let s2 = g.add(s1, t3);
    let ln_bc = g.add(s2, t4);
    let bc = g.exp(ln_bc);
    let neg = g.mul_scalar(bc, -1.0);
    g.add_scalar(neg, 1.0)
}

/// `-ln softmax(logits)[target]` where `logits_j = -dh2_j / tau`, built with
/// an exact constant-shift log-sum-exp.
pub(crate) fn neg_log_softmax(g: &mut Graph, dh2: &[Var], target: usize, tau: f64) -> Var {
    let logits: Vec<Var> = dh2.iter().map(|&d| g.mul_scalar(d, -1.0 / tau)).collect();
    let shift = logits
        .iter()
        .map(|&l| g.value(l).scalar_value())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = None;
    for &l in &logits {
        let e = g.add_scalar(l, -shift);
        let e = g.exp(e);
        sum = Some(match sum {
            None => e,
            Some(s) => g.add(s, e),
        });
    }
    let lse = g.ln(sum.expect("at least one logit"));
    let lse = g.add_scalar(lse, shift);
    g.sub(lse, logits[target])
}

/// Mean of scalar nodes; zero constant when empty.
pub(crate) fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t);
            }
            g.mul_scalar(acc, 1.0 / terms.len() as f64)
        }
    }
}

/// Inputs for one differentiable episode-loss build.
pub(crate) struct EpisodeGraphSpec<'a> {
    pub support_x: &'a Tensor,
    pub support_y: &'a [usize],
    pub query_x: &'a Tensor,
    pub query_y: &'a [usize],
    pub n_classes: usize,
    pub weights: &'a LossWeights,
    pub penalty: &'a PenaltyKind,
    pub temperature: f64,
    /// Added to the final feature map, rows `[support..., query...]`.
    pub feat_offset: Option<&'a Tensor>,
    /// Reparameterization noise `[n_query, d]`; `None` decodes the means.
    pub rec_noise: Option<&'a Tensor>,
    pub track_params: bool,
    /// Track the (zero) feature offset instead of the parameters; its
    /// gradient is the loss gradient w.r.t. the final feature map.
    pub track_offset: bool,
}

/// A built episode graph with handles to the loss terms.
pub(crate) struct EpisodeGraph {
    pub graph: Graph,
    pub param_vars: Vec<(String, Var)>,
    pub offset_var: Option<Var>,
    pub total: Var,
    pub cce: Var,
    pub hesim: Var,
    pub rec: Var,
    pub prior: Var,
    pub accuracy: f64,
    pub clamped_rows: usize,
    pub skipped_anchors: usize,
}

impl EpisodeGraph {
    fn scalar(&self, v: Var) -> f64 {
        self.graph.value(v).scalar_value()
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.scalar(self.total),
            cce: self.scalar(self.cce),
            hesim: self.scalar(self.hesim),
            rec: self.scalar(self.rec),
            prior: self.scalar(self.prior),
            accuracy: self.accuracy,
            clamped_rows: self.clamped_rows,
            skipped_anchors: self.skipped_anchors,
        }
    }
}

fn validate_batch(
    what: &str,
    x: &Tensor,
    y: &[usize],
    dims: (usize, usize, usize),
    n_classes: usize,
) -> Result<usize> {
    let (b, c, h, w) = x.dims4()?;
    if (c, h, w) != dims {
        return Err(Error::contract(format!(
            "{what} batch is [{b}, {c}, {h}, {w}], architecture expects {dims:?}"
        )));
    }
    if b != y.len() {
        return Err(Error::contract(format!(
            "{what} batch has {b} records but {} labels",
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::contract(format!(
            "{what} label {bad} out of {n_classes} classes"
        )));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract(format!("{what} values must lie in [0, 1]")));
    }
    Ok(b)
}

fn class_rows(y: &[usize], n_classes: usize, offset: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); n_classes];
    for (i, &label) in y.iter().enumerate() {
        rows[label].push(i + offset);
    }
    rows
}

/// Builds the full composite loss for one (possibly augmented) episode.
pub(crate) fn build_episode_graph(
    state: &ModelState,
    spec: &EpisodeGraphSpec,
) -> Result<EpisodeGraph> {
    let arch = state.arch().clone();
    let dims = (arch.in_channels, arch.height, arch.width);
    if spec.n_classes == 0 {
        return Err(Error::contract("episode needs at least one class"));
    }
    if !(spec.temperature > 0.0 && spec.temperature.is_finite()) {
        return Err(Error::contract("temperature must be finite and > 0"));
    }
    let ns = validate_batch("support", spec.support_x, spec.support_y, dims, spec.n_classes)?;
    let nq = validate_batch("query", spec.query_x, spec.query_y, dims, spec.n_classes)?;
    let b = ns + nq;

    let support_rows = class_rows(spec.support_y, spec.n_classes, 0);
    if let Some(empty) = support_rows.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!(
            "class {empty} has no support records"
        )));
    }
    let query_rows = class_rows(spec.query_y, spec.n_classes, ns);

    let x_all = {
        let mut data = Vec::with_capacity(spec.support_x.numel() + spec.query_x.numel());
        data.extend_from_slice(spec.support_x.data());
        data.extend_from_slice(spec.query_x.data());
        Tensor::new(vec![b, dims.0, dims.1, dims.2], data)?
    };

    let (hf, wf) = arch.final_dims();
    let feat_shape = vec![b, arch.widths[3], hf, wf];
    if let Some(off) = spec.feat_offset {
        if off.shape() != feat_shape.as_slice() {
            return Err(Error::contract(format!(
                "feature offset has shape {:?}, expected {feat_shape:?}",
                off.shape()
            )));
        }
    }
    if let Some(noise) = spec.rec_noise {
        if noise.shape() != [nq, arch.latent_dim] {
            return Err(Error::contract(format!(
                "reconstruction noise has shape {:?}, expected [{nq}, {}]",
                noise.shape(),
                arch.latent_dim
            )));
        }
    }

    let mut g = Graph::new();
    let params = bind_params(&mut g, state, spec.track_params);
    let xv = g.constant(x_all);
    let offset_var = if spec.track_offset {
        let t = spec
            .feat_offset
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(feat_shape));
        Some(g.leaf(t))
    } else {
        spec.feat_offset.map(|t| g.constant(t.clone()))
    };
    let trace = encoder_graph(&mut g, &params, &arch, xv, offset_var);
    check_taps(&g, &trace.taps)?;
    let (mu, var) = (trace.mu, trace.var);

    // Support prototypes, one per class in label order.
    let protos: Vec<RowDist> = support_rows
        .iter()
        .map(|rows| proto_dist(&mut g, mu, var, rows))
        .collect();

    // Classification loss and accuracy over queries.
    let mut cce_terms = Vec::with_capacity(nq);
    let mut clamped_rows = 0usize;
    let mut hits = 0usize;
    for (qi, &label) in spec.query_y.iter().enumerate() {
        let qd = row_dist(&mut g, mu, var, ns + qi);
        let dh2: Vec<Var> = protos
            .iter()
            .map(|p| hellinger_sq_dist(&mut g, &qd, p))
            .collect();
        let pred = dh2
            .iter()
            .enumerate()
            .min_by(|a, b| {
                g.value(*a.1)
                    .scalar_value()
                    .partial_cmp(&g.value(*b.1).scalar_value())
                    .expect("finite distances")
            })
            .expect("at least one class")
            .0;
        if pred == label {
            hits += 1;
        }
        let nls = neg_log_softmax(&mut g, &dh2, label, spec.temperature);
        if g.value(nls).scalar_value() > -PROB_FLOOR.ln() {
            clamped_rows += 1;
        }
        cce_terms.push(nls);
    }
    let cce = mean_of(&mut g, &cce_terms);
    let accuracy = hits as f64 / nq.max(1) as f64;

    // Leave-one-out contrastive loss over queries.
    let mut hesim_terms = Vec::new();
    let mut skipped_anchors = 0usize;
    let present: Vec<usize> = (0..spec.n_classes)
        .filter(|&c| !query_rows[c].is_empty())
        .collect();
    for (qi, &label) in spec.query_y.iter().enumerate() {
        let anchor_row = ns + qi;
        if query_rows[label].len() < 2 {
            skipped_anchors += 1;
            continue;
        }
        let anchor = row_dist(&mut g, mu, var, anchor_row);
        let mut dh2 = Vec::with_capacity(present.len());
        let mut target = 0usize;
        for (pos, &class) in present.iter().enumerate() {
            let rows: Vec<usize> = query_rows[class]
                .iter()
                .copied()
                .filter(|&r| r != anchor_row)
                .collect();
            let proto = proto_dist(&mut g, mu, var, &rows);
            dh2.push(hellinger_sq_dist(&mut g, &anchor, &proto));
            if class == label {
                target = pos;
            }
        }
        hesim_terms.push(neg_log_softmax(&mut g, &dh2, target, spec.temperature));
    }
    let hesim = mean_of(&mut g, &hesim_terms);

    // Reconstruction of the (fed) query images from reparameterized latents.
    let rec = if spec.weights.lambda2 > 0.0 {
        let mu_q = g.rows_range(mu, ns, b);
        let z = match spec.rec_noise {
            None => mu_q,
            Some(noise) => {
                let var_q = g.rows_range(var, ns, b);
                let sd = g.sqrt(var_q);
                let nv = g.constant(noise.clone());
                let scaled = g.mul(sd, nv);
                g.add(mu_q, scaled)
            }
        };
        let (dec, dec_taps) = decoder_graph(&mut g, &params, &arch, z);
        check_taps(&g, &dec_taps)?;
        let target = g.constant(spec.query_x.clone());
        let diff = g.sub(dec, target);
        let adiff = g.abs(diff);
        g.mean(adiff)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    // Prior penalty over all support and query posteriors.
    let prior = if spec.weights.lambda3 > 0.0 {
        let rows = penalty_rows_on_graph(&mut g, mu, var, spec.penalty.family);
        let m = g.mean(rows);
        g.mul_scalar(m, spec.penalty.lambda)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let w_hesim = g.mul_scalar(hesim, spec.weights.lambda1);
    let w_rec = g.mul_scalar(rec, spec.weights.lambda2);
    let w_prior = g.mul_scalar(prior, spec.weights.lambda3);
    let s1 = g.add(cce, w_hesim);
    let s2 = g.add(s1, w_rec);
    let total = g.add(s2, w_prior);

    let param_vars = params.iter().map(|(n, v)| (n.clone(), v)).collect();
    Ok(EpisodeGraph {
        graph: g,
        param_vars,
        offset_var,
        total,
        cce,
        hesim,
        rec,
        prior,
        accuracy,
        clamped_rows,
        skipped_anchors,
    })
}

/// Mean cross entropy of a batch against prototypes, differentiated w.r.t.
/// the input pixels. With `protos = None` the prototypes are built from the
/// batch itself (used to point sign attacks when no external prototypes
/// exist). Returns `(loss, d loss / d x)`.
pub(crate) fn batch_cce_input_grad(
    state: &ModelState,
    x: &Tensor,
    y: &[usize],
    protos: Option<&[DiagGaussian]>,
    temperature: f64,
) -> Result<(f64, Tensor)> {
    let arch = state.arch().clone();
    let dims = (arch.in_channels, arch.height, arch.width);
    let n_classes = match protos {
        Some(p) => {
            if p.is_empty() {
                return Err(Error::contract("need at least one prototype"));
            }
            if p.iter().any(|d| d.dim() != arch.latent_dim) {
                return Err(Error::contract("prototype dimension mismatch"));
            }
            p.len()
        }
        None => y.iter().max().map_or(0, |&m| m + 1),
    };
    validate_batch("attack", x, y, dims, n_classes)?;
    if protos.is_none() {
        let groups = class_rows(y, n_classes, 0);
        if let Some(empty) = groups.iter().position(Vec::is_empty) {
            return Err(Error::contract(format!(
                "class {empty} has no records to build a prototype from"
            )));
        }
    }

    let mut g = Graph::new();
    let params = bind_params(&mut g, state, false);
    let xv = g.leaf(x.clone());
    let trace = encoder_graph(&mut g, &params, &arch, xv, None);
    check_taps(&g, &trace.taps)?;
    let (mu, var) = (trace.mu, trace.var);

    let proto_dists: Vec<RowDist> = match protos {
        Some(ps) => ps.iter().map(|p| const_dist(&mut g, p)).collect(),
        None => class_rows(y, n_classes, 0)
            .iter()
            .map(|rows| proto_dist(&mut g, mu, var, rows))
            .collect(),
    };

    let mut terms = Vec::with_capacity(y.len());
    for (i, &label) in y.iter().enumerate() {
        let qd = row_dist(&mut g, mu, var, i);
        let dh2: Vec<Var> = proto_dists
            .iter()
            .map(|p| hellinger_sq_dist(&mut g, &qd, p))
            .collect();
        terms.push(neg_log_softmax(&mut g, &dh2, label, temperature));
    }
    let loss = mean_of(&mut g, &terms);
    let value = g.value(loss).scalar_value();
    if !value.is_finite() {
        return Err(Error::numeric(format!("attack loss is non-finite: {value}")));
    }
    let grads = g.backward(loss);
    let grad = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::super::{
        cce_loss, class_prototype, helanet_loss, hellinger_softmax, hesim_loss, rec_loss,
        ClassPrototype, Episode, LossWeights,
    };
    use super::*;
    use crate::gauss::hellinger_sq;
    use crate::gradcheck::{fd_grads, rel_err};
    use crate::net::{decode_batch, encode, Arch, Backbone};
    use crate::rng::{rng_from_seed, standard_normals};
    use crate::variational::{penalty, PenaltyFamily};
    use rand::Rng;

    fn micro_arch() -> Arch {
        Arch {
            backbone: Backbone::Conv4Attn,
            in_channels: 1,
            height: 8,
            width: 8,
            widths: [4, 4, 4, 4],
            latent_dim: 4,
            reduction: 2,
            attention: true,
        }
    }

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data = (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, 8, 8], data).unwrap()
    }

    fn micro_episode(seed: u64) -> Episode {
        // 2-way, 2-shot, 2 queries per class.
        Episode {
            support_images: random_images(4, seed),
            support_labels: vec![0, 0, 1, 1],
            query_images: random_images(4, seed + 1),
            query_labels: vec![0, 1, 0, 1],
            classes: vec![0, 1],
            seed,
        }
    }

    #[test]
    fn tape_hellinger_matches_pure() {
        let mut rng = rng_from_seed(8);
        for _ in 0..5 {
            let d = 3;
            let ma: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mb: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let va: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
            let vb: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
            let pa = DiagGaussian::new(ma.clone(), va.clone()).unwrap();
            let pb = DiagGaussian::new(mb.clone(), vb.clone()).unwrap();
            let want = hellinger_sq(&pa, &pb).unwrap().value;

            let mut g = Graph::new();
            let a = const_dist(&mut g, &pa);
            let b = const_dist(&mut g, &pb);
            let dh2 = hellinger_sq_dist(&mut g, &a, &b);
            assert!((g.value(dh2).scalar_value() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_softmax_loss_matches_pure() {
        let v = DiagGaussian::new(vec![0.2, -0.4], vec![0.9, 1.4]).unwrap();
        let p0 = DiagGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let p1 = DiagGaussian::new(vec![1.0, -1.0], vec![0.5, 2.0]).unwrap();
        let protos = vec![
            ClassPrototype {
                class_id: 0,
                dist: p0.clone(),
            },
            ClassPrototype {
                class_id: 1,
                dist: p1.clone(),
            },
        ];
        for tau in [0.5, 1.0, 2.0] {
            let probs = hellinger_softmax(&v, &protos, tau).unwrap();
            let want = -probs[1].ln();

            let mut g = Graph::new();
            let vv = const_dist(&mut g, &v);
            let d0v = const_dist(&mut g, &p0);
            let d1v = const_dist(&mut g, &p1);
            let dh2 = vec![
                hellinger_sq_dist(&mut g, &vv, &d0v),
                hellinger_sq_dist(&mut g, &vv, &d1v),
            ];
            let nls = neg_log_softmax(&mut g, &dh2, 1, tau);
            assert!((g.value(nls).scalar_value() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn episode_breakdown_matches_pure_ops() {
        // The tape episode loss must agree with the pure-value pipeline:
        // encode, prototype, softmax, cce / hesim / rec / penalty.
        let arch = micro_arch();
        let state = ModelState::init(arch, 5).unwrap();
        let ep = micro_episode(40);
        let weights = LossWeights {
            lambda1: 0.7,
            lambda2: 0.9,
            lambda3: 0.3,
        };
        let kind = PenaltyKind {
            family: PenaltyFamily::HellingerElbo,
            lambda: 1.5,
        };
        let got = helanet_loss(&ep, &state, &weights, &kind).unwrap();

        let s_enc = encode(&state, &ep.support_images).unwrap();
        let q_enc = encode(&state, &ep.query_images).unwrap();
        let mut protos = Vec::new();
        for class in 0..2 {
            let members: Vec<DiagGaussian> = s_enc
                .iter()
                .zip(&ep.support_labels)
                .filter(|(_, &y)| y == class)
                .map(|(e, _)| e.posterior.clone())
                .collect();
            protos.push(ClassPrototype {
                class_id: class,
                dist: class_prototype(&members).unwrap(),
            });
        }
        let probs: Vec<Vec<f64>> = q_enc
            .iter()
            .map(|e| hellinger_softmax(&e.posterior, &protos, 1.0).unwrap())
            .collect();
        let want_cce = cce_loss(&probs, &ep.query_labels).unwrap().value;
        assert!((got.cce - want_cce).abs() < 1e-10, "cce {} vs {want_cce}", got.cce);

        let q_dists: Vec<DiagGaussian> = q_enc.iter().map(|e| e.posterior.clone()).collect();
        let want_hesim = hesim_loss(&q_dists, &ep.query_labels, 1.0).unwrap().value;
        assert!((got.hesim - want_hesim).abs() < 1e-10);

        let mu_rows: Vec<Vec<f64>> = q_enc.iter().map(|e| e.posterior.mean().to_vec()).collect();
        let z = Tensor::from_rows(&mu_rows).unwrap();
        let dec = decode_batch(&state, &z).unwrap();
        let want_rec = rec_loss(&dec, &ep.query_images).unwrap();
        assert!((got.rec - want_rec).abs() < 1e-10);

        let mut want_prior = 0.0;
        for e in s_enc.iter().chain(&q_enc) {
            want_prior += penalty(&e.posterior, &kind).unwrap().value;
        }
        want_prior /= 8.0;
        assert!((got.prior - want_prior).abs() < 1e-10);

        let want_total =
            want_cce + 0.7 * want_hesim + 0.9 * want_rec + 0.3 * want_prior;
        assert!((got.total - want_total).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_leave_only_cce() {
        let state = ModelState::init(micro_arch(), 6).unwrap();
        let ep = micro_episode(41);
        let weights = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let kind = PenaltyKind::default();
        let got = helanet_loss(&ep, &state, &weights, &kind).unwrap();
        assert_eq!(got.total, got.cce);
        assert_eq!(got.rec, 0.0, "reconstruction path is skipped");
        assert_eq!(got.prior, 0.0);
    }

    #[test]
    fn additivity_holds_exactly() {
        let state = ModelState::init(micro_arch(), 7).unwrap();
        let ep = micro_episode(42);
        let weights = LossWeights {
            lambda1: 0.4,
            lambda2: 1.3,
            lambda3: 0.2,
        };
        let kind = PenaltyKind {
            family: PenaltyFamily::KlElbo,
            lambda: 0.8,
        };
        let got = helanet_loss(&ep, &state, &weights, &kind).unwrap();
        let recomposed =
            got.cce + 0.4 * got.hesim + 1.3 * got.rec + 0.2 * got.prior;
        assert!((got.total - recomposed).abs() < 1e-12);
    }

    #[test]
    fn episode_gradients_match_fd() {
        // Full composite loss (all four terms, with reparameterization
        // noise) against central differences for every parameter.
        let arch = micro_arch();
        let state = ModelState::init(arch.clone(), 21).unwrap();
        let ep = micro_episode(50);
        let weights = LossWeights {
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 0.25,
        };
        let kind = PenaltyKind {
            family: PenaltyFamily::HellingerElbo,
            lambda: 1.0,
        };
        let mut rng = rng_from_seed(60);
        let noise = Tensor::new(vec![4, 4], standard_normals(&mut rng, 16)).unwrap();

        let spec_for = |_st: &ModelState, track: bool| EpisodeGraphSpec {
            support_x: &ep.support_images,
            support_y: &ep.support_labels,
            query_x: &ep.query_images,
            query_y: &ep.query_labels,
            n_classes: 2,
            weights: &weights,
            penalty: &kind,
            temperature: 1.0,
            feat_offset: None,
            rec_noise: Some(&noise),
            track_params: track,
            track_offset: false,
        };

        let names: Vec<String> = state.params().keys().cloned().collect();
        let at: Vec<Tensor> = names.iter().map(|n| state.param(n).unwrap().clone()).collect();
        let arch_c = arch.clone();
        let loss_of = |tensors: &[Tensor]| -> f64 {
            let params = names.iter().cloned().zip(tensors.iter().cloned()).collect();
            let st = ModelState::from_params(arch_c.clone(), params).unwrap();
            let eg = build_episode_graph(&st, &spec_for(&st, false)).unwrap();
            eg.breakdown().total
        };

        let eg = build_episode_graph(&state, &spec_for(&state, true)).unwrap();
        let grads = eg.graph.backward(eg.total);
        let fd = fd_grads(loss_of, &at, 1e-5);
        for (i, name) in names.iter().enumerate() {
            let var = eg
                .param_vars
                .iter()
                .find(|(n, _)| n == name)
                .expect("bound")
                .1;
            let got = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(at[i].shape().to_vec()));
            let err = rel_err(&got, &fd[i]);
            assert!(err < 5e-4, "param {name}: rel err {err}");
        }
    }

    #[test]
    fn offset_gradient_matches_fd() {
        // The tracked zero offset must carry d loss / d feature-map.
        let arch = micro_arch();
        let state = ModelState::init(arch.clone(), 23).unwrap();
        let ep = micro_episode(51);
        let weights = LossWeights::default();
        let kind = PenaltyKind::default();
        macro_rules! base_spec {
            ($off:expr, $track:expr) => {
                EpisodeGraphSpec {
                    support_x: &ep.support_images,
                    support_y: &ep.support_labels,
                    query_x: &ep.query_images,
                    query_y: &ep.query_labels,
                    n_classes: 2,
                    weights: &weights,
                    penalty: &kind,
                    temperature: 1.0,
                    feat_offset: $off,
                    rec_noise: None,
                    track_params: false,
                    track_offset: $track,
                }
            };
        }

        let eg = build_episode_graph(&state, &base_spec!(None, true)).unwrap();
        let grads = eg.graph.backward(eg.total);
        let got = grads.get(eg.offset_var.unwrap()).cloned().unwrap();

        let zero = Tensor::zeros(vec![8, 4, 1, 1]);
        let loss_at = |off: &[Tensor]| -> f64 {
            let eg = build_episode_graph(&state, &base_spec!(Some(&off[0]), false)).unwrap();
            eg.breakdown().total
        };
        let fd = fd_grads(loss_at, std::slice::from_ref(&zero), 1e-5);
        let err = rel_err(&got, &fd[0]);
        assert!(err < 1e-4, "offset grad rel err {err}");
    }

    #[test]
    fn batch_cce_grad_matches_fd() {
        let arch = micro_arch();
        let state = ModelState::init(arch, 31).unwrap();
        let x = random_images(4, 70);
        let y = [0usize, 0, 1, 1];

        // Self-prototype variant.
        let (loss, grad) = batch_cce_input_grad(&state, &x, &y, None, 1.0).unwrap();
        assert!(loss.is_finite());
        let f = |xs: &[Tensor]| -> f64 {
            batch_cce_input_grad(&state, &xs[0], &y, None, 1.0).unwrap().0
        };
        let fd = fd_grads(f, std::slice::from_ref(&x), 1e-5);
        assert!(rel_err(&grad, &fd[0]) < 1e-4);

        // Fixed external prototypes.
        let protos = vec![
            DiagGaussian::new(vec![0.1; 4], vec![1.0; 4]).unwrap(),
            DiagGaussian::new(vec![-0.1; 4], vec![0.5; 4]).unwrap(),
        ];
        let (loss2, grad2) =
            batch_cce_input_grad(&state, &x, &y, Some(&protos), 1.0).unwrap();
        assert!(loss2.is_finite());
        let f2 = |xs: &[Tensor]| -> f64 {
            batch_cce_input_grad(&state, &xs[0], &y, Some(&protos), 1.0)
                .unwrap()
                .0
        };
        let fd2 = fd_grads(f2, std::slice::from_ref(&x), 1e-5);
        assert!(rel_err(&grad2, &fd2[0]) < 1e-4);
    }

    #[test]
    fn accuracy_counts_nearest_prototype_hits() {
        // A state with deterministic behavior: accuracy is in [0, 1] and
        // consistent between tape and pure prediction.
        let state = ModelState::init(micro_arch(), 33).unwrap();
        let ep = micro_episode(52);
        let got = helanet_loss(&ep, &state, &LossWeights::default(), &PenaltyKind::default())
            .unwrap();
        let acc = super::super::eval_episode(&state, &ep, &super::super::QueryPerturb::None)
            .unwrap();
        assert!((got.accuracy - acc).abs() < 1e-12);
    }
}
