//! Evaluation tooling: Frechet distance between feature statistics,
//! gradient-weighted class-activation heatmaps, and accuracy sweeps over
//! attack or noise strength.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::episode::tape::{const_dist, hellinger_sq_dist, row_dist};
use crate::episode::{evaluate_perturbed, ClassPrototype, Dataset, EvalReport, QueryPerturb};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::{bind_params, check_taps, encode, encoder_graph, pooled_features, decode_batch, ModelState};
use crate::tensor::Tensor;

/// Sample mean, unbiased covariance, and count of a feature cloud.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `[d, d]`, symmetric by construction.
    pub cov: Tensor,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and unbiased sample covariance of `features` (each an equal-length
/// vector; at least two of them).
pub fn feature_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "covariance needs at least 2 feature vectors, got {n}"
        )));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::contract("feature vectors must be non-empty"));
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::contract("feature vectors have mixed dimensions"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite feature value"));
    }
    let nf = n as f64;
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, &v) in mu.iter_mut().zip(f) {
            *m += v / nf;
        }
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for j in 0..d {
            let dj = f[j] - mu[j];
            for k in j..d {
                cov[j * d + k] += dj * (f[k] - mu[k]) / (nf - 1.0);
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            cov[j * d + k] = cov[k * d + j];
        }
    }
    Ok(FeatureStats {
        mu,
        cov: Tensor::new(vec![d, d], cov)?,
        n,
    })
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the rotation matrix `v` with eigenvectors as columns,
/// so `a = v diag(evals) v^T`.
fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale = a
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= 1e-14 * scale * d as f64 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let mip = m[i * d + p];
                    let miq = m[i * d + q];
                    m[i * d + p] = c * mip - s * miq;
                    m[i * d + q] = s * mip + c * miq;
                }
                for j in 0..d {
                    let mpj = m[p * d + j];
                    let mqj = m[q * d + j];
                    m[p * d + j] = c * mpj - s * mqj;
                    m[q * d + j] = s * mpj + c * mqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let evals = (0..d).map(|i| m[i * d + i]).collect();
    (evals, v)
}

/// Symmetric square root with eigenvalues clamped at zero.
fn sym_sqrt(a: &[f64], d: usize) -> Vec<f64> {
    let (evals, v) = jacobi_eigh(a, d);
    let roots: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // v diag(roots) v^T
    let mut vr = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vr[i * d + j] = v[i * d + j] * roots[j];
        }
    }
    let mut vt = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            vt[i * d + j] = v[j * d + i];
        }
    }
    mat_mul(&vr, &vt, d)
}

/// Frechet distance between two feature-statistic summaries:
/// `|mu_r - mu_g|^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2))`, the matrix root
/// taken via the symmetric product `S C_g S` with `S = C_r^(1/2)`.
/// Sampling noise can push tiny eigenvalues negative; they clamp to zero,
/// and the result clamps to be non-negative.
pub fn fid(r: &FeatureStats, g: &FeatureStats) -> Result<f64> {
    let d = r.dim();
    if d != g.dim() {
        return Err(Error::contract(format!(
            "feature stats have dimensions {d} and {}",
            g.dim()
        )));
    }
    let dmu: f64 = r
        .mu
        .iter()
        .zip(&g.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let cr = r.cov.data();
    let cg = g.cov.data();
    let s = sym_sqrt(cr, d);
    let mut m = mat_mul(&mat_mul(&s, cg, d), &s, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
    let (evals, _) = jacobi_eigh(&m, d);
    let tr_sqrt: f64 = evals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_r: f64 = (0..d).map(|i| cr[i * d + i]).sum();
    let tr_g: f64 = (0..d).map(|i| cg[i * d + i]).sum();
    Ok((dmu + tr_r + tr_g - 2.0 * tr_sqrt).max(0.0))
}

/// Maps an image batch `[n, c, h, w]` to one feature vector per record.
pub trait FeatureExtractor {
    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;
}

/// The trained encoder's pooled pre-head features (the default; compact and
/// model-aware, not comparable across models).
pub struct PooledFeatures<'a> {
    pub state: &'a ModelState,
}

impl FeatureExtractor for PooledFeatures<'_> {
    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        pooled_features(self.state, images)
    }
}

/// Raw flattened pixels; model-free reference extractor.
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (b, c, h, w) = images.dims4()?;
        let slab = c * h * w;
        Ok((0..b)
            .map(|i| images.data()[i * slab..(i + 1) * slab].to_vec())
            .collect())
    }
}

/// Frechet distance between a batch and its reconstructions (posterior-mean
/// latents through the decoder), in the extractor's feature space.
pub fn reconstruction_fid(
    state: &ModelState,
    images: &Tensor,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let enc = encode(state, images)?;
    let mu_rows: Vec<Vec<f64>> = enc.iter().map(|e| e.posterior.mean().to_vec()).collect();
    let z = Tensor::from_rows(&mu_rows)?;
    let recon = decode_batch(state, &z)?;
    let real = feature_stats(&extractor.features(images)?)?;
    let fake = feature_stats(&extractor.features(&recon)?)?;
    fid(&real, &fake)
}

/// Per-record min-max normalized ReLU of the channel-weighted feature map.
/// `feat` and `grad` are one record's `[c, h, w]` slabs; the weights are the
/// spatial means of `grad` per channel.
fn cam_combine(feat: &[f64], grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let weights: Vec<f64> = (0..c)
        .map(|ch| grad[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        for i in 0..hw {
            cam[i] += weights[ch] * feat[ch * hw + i];
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-300 {
        return vec![0.0; hw];
    }
    for v in &mut cam {
        *v = (*v - lo) / (hi - lo);
    }
    cam
}

/// Bilinear upsample of one `[h, w]` plane to `[out_h, out_w]`, corners
/// aligned.
fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    let fh = if out_h > 1 {
        (h as f64 - 1.0) / (out_h as f64 - 1.0)
    } else {
        0.0
    };
    let fw = if out_w > 1 {
        (w as f64 - 1.0) / (out_w as f64 - 1.0)
    } else {
        0.0
    };
    for oy in 0..out_h {
        let y = oy as f64 * fh;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = y - y0 as f64;
        for ox in 0..out_w {
            let x = ox as f64 * fw;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = x - x0 as f64;
            let a = src[y0 * w + x0];
            let b = src[y0 * w + x1];
            let c = src[y1 * w + x0];
            let d = src[y1 * w + x1];
            out.push(
                a * (1.0 - ty) * (1.0 - tx)
                    + b * (1.0 - ty) * tx
                    + c * ty * (1.0 - tx)
                    + d * ty * tx,
            );
        }
    }
    out
}

/// Class-activation heatmaps: the classification score is the negative
/// squared Hellinger distance to the target class prototype; each channel of
/// the final feature map is weighted by the spatial mean of the score's
/// gradient there, combined maps are rectified, per-record min-max
/// normalized, and bilinearly upsampled to the input size. Returns
/// `[n, 1, height, width]` with values in `[0, 1]`.
pub fn grad_cam(
    state: &ModelState,
    x: &Tensor,
    target_class: usize,
    prototypes: &[ClassPrototype],
) -> Result<Tensor> {
    let arch = state.arch().clone();
    let (b, c, h, w) = x.dims4()?;
    if (c, h, w) != (arch.in_channels, arch.height, arch.width) {
        return Err(Error::contract(format!(
            "batch is [{b}, {c}, {h}, {w}], architecture expects {:?}",
            (arch.in_channels, arch.height, arch.width)
        )));
    }
    let target = prototypes
        .iter()
        .find(|p| p.class_id == target_class)
        .ok_or_else(|| {
            Error::contract(format!("no prototype for target class {target_class}"))
        })?;
    if target.dist.dim() != arch.latent_dim {
        return Err(Error::contract(format!(
            "prototype dimension {} does not match latent dimension {}",
            target.dist.dim(),
            arch.latent_dim
        )));
    }

    let (hf, wf) = arch.final_dims();
    let cf = arch.widths[3];
    let mut g = Graph::new();
    let params = bind_params(&mut g, state, false);
    let xv = g.constant(x.clone());
    // A tracked zero offset on the final feature map carries exactly
    // d score / d activation.
    let offset = g.leaf(Tensor::zeros(vec![b, cf, hf, wf]));
    let trace = encoder_graph(&mut g, &params, &arch, xv, Some(offset));
    check_taps(&g, &trace.taps)?;

    let proto = const_dist(&mut g, &target.dist);
    let mut score = None;
    for i in 0..b {
        let qd = row_dist(&mut g, trace.mu, trace.var, i);
        let dh2 = hellinger_sq_dist(&mut g, &qd, &proto);
        let neg = g.mul_scalar(dh2, -1.0);
        score = Some(match score {
            None => neg,
            Some(s) => g.add(s, neg),
        });
    }
    let score = score.ok_or_else(|| Error::contract("heatmaps need at least one record"))?;
    let grads = g.backward(score);
    let gr = grads
        .get(offset)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(vec![b, cf, hf, wf]));
    let feat = g.value(trace.feat).clone();

    let slab = cf * hf * wf;
    let mut out = Vec::with_capacity(b * h * w);
    for i in 0..b {
        let cam = cam_combine(
            &feat.data()[i * slab..(i + 1) * slab],
            &gr.data()[i * slab..(i + 1) * slab],
            cf,
            hf,
            wf,
        );
        out.extend(bilinear_upsample(&cam, hf, wf, h, w));
    }
    Tensor::new(vec![b, 1, h, w], out)
}

/// Writes each `[n, 1, h, w]` heatmap as an 8-bit binary PGM named
/// `cam_<index>_<class>.pgm` in `dir`; returns the paths.
pub fn write_heatmaps(maps: &Tensor, target_class: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let (b, c, h, w) = maps.dims4()?;
    if c != 1 {
        return Err(Error::contract(format!(
            "heatmaps must be single-channel, got {c}"
        )));
    }
    let mut paths = Vec::with_capacity(b);
    for i in 0..b {
        let path = dir.join(format!("cam_{i}_{target_class}.pgm"));
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        for &v in &maps.data()[i * h * w..(i + 1) * h * w] {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Which perturbation a sweep scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Adversarial,
    Gaussian,
}

impl SweepKind {
    fn label(self) -> &'static str {
        match self {
            SweepKind::Adversarial => "adversarial",
            SweepKind::Gaussian => "gaussian",
        }
    }
}

/// Accuracy as a function of perturbation strength, with the evaluation
/// protocol held fixed across levels.
#[derive(Debug, Clone)]
pub struct SweepCurve {
    pub kind: SweepKind,
    pub levels: Vec<f64>,
    /// Per level: (mean accuracy, ci95).
    pub accuracy: Vec<(f64, f64)>,
    pub episodes: usize,
    pub trained_robust: bool,
}

/// Evaluates the model at each perturbation level. Level zero runs the
/// unperturbed protocol, so its row reproduces a plain evaluation exactly
/// (episode seeds do not depend on the level).
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    state: &ModelState,
    ds: &Dataset,
    n: usize,
    k: usize,
    q: usize,
    kind: SweepKind,
    levels: &[f64],
    episodes: usize,
    seed: u64,
    trained_robust: bool,
) -> Result<SweepCurve> {
    if levels.is_empty() {
        return Err(Error::contract("sweep needs at least one level"));
    }
    if levels.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::contract("sweep levels must be finite and >= 0"));
    }
    if levels.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::contract("sweep levels must be strictly increasing"));
    }
    let mut accuracy = Vec::with_capacity(levels.len());
    for &level in levels {
        let perturb = if level == 0.0 {
            QueryPerturb::None
        } else {
            match kind {
                SweepKind::Adversarial => QueryPerturb::Fgsm { epsilon: level },
                // The per-episode noise stream is derived inside the
                // evaluator; this seed field is a placeholder.
                SweepKind::Gaussian => QueryPerturb::Gaussian { sigma: level, seed: 0 },
            }
        };
        let report: EvalReport = evaluate_perturbed(state, ds, n, k, q, episodes, seed, &perturb)?;
        accuracy.push((report.accuracy, report.ci95));
    }
    Ok(SweepCurve {
        kind,
        levels: levels.to_vec(),
        accuracy,
        episodes,
        trained_robust,
    })
}

/// Writes sweep curves as CSV rows under the header
/// `kind,level,acc_mean,acc_ci95,episodes,trained_robust`.
pub fn write_sweep_csv(curves: &[SweepCurve], path: &Path) -> Result<()> {
    let mut out = String::from("kind,level,acc_mean,acc_ci95,episodes,trained_robust\n");
    for curve in curves {
        for (&level, &(mean, ci)) in curve.levels.iter().zip(&curve.accuracy) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                curve.kind.label(),
                level,
                mean,
                ci,
                curve.episodes,
                curve.trained_robust
            )
            .expect("string write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
