//! Graph builders and the public forward API for the encoder-decoder.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gauss::{DiagGaussian, VAR_FLOOR};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

use super::{Arch, Backbone, ModelState};

/// Named parameter nodes bound into one graph.
pub(crate) struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Lookup by catalog name; the state was validated against the same
    /// catalog, so a miss is an internal bug.
    pub(crate) fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, v)| (n, *v))
    }
}

/// Inserts every parameter as a leaf (tracked) or constant node.
pub(crate) fn bind_params(g: &mut Graph, state: &ModelState, tracked: bool) -> BoundParams {
    let vars = state
        .params()
        .iter()
        .map(|(name, t)| {
            let v = if tracked {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            (name.clone(), v)
        })
        .collect();
    BoundParams { vars }
}

/// Encoder forward trace. `feat` is the attention-refined final feature map
/// (the node whose gradient drives feature-space perturbations), `pooled`
/// its global average, `taps` named activations for finite diagnostics.
pub(crate) struct EncTrace {
    pub mu: Var,
    pub var: Var,
    pub feat: Var,
    pub pooled: Var,
    pub taps: Vec<(String, Var)>,
}

fn channel_attention_graph(
    g: &mut Graph,
    x: Var,
    fc1w: Var,
    fc1b: Var,
    fc2w: Var,
    fc2b: Var,
) -> Var {
    let avg = g.mean_spatial(x);
    let mx = g.max_spatial(x);
    let ha = g.linear(avg, fc1w, fc1b);
    let ha = g.relu(ha);
    let hm = g.linear(mx, fc1w, fc1b);
    let hm = g.relu(hm);
    let oa = g.linear(ha, fc2w, fc2b);
    let om = g.linear(hm, fc2w, fc2b);
    let s = g.add(oa, om);
    let gate = g.sigmoid(s);
    g.gate_channel(gate, x)
}

fn spatial_attention_graph(g: &mut Graph, x: Var, convw: Var, convb: Var) -> Var {
    let avg = g.mean_channel(x);
    let mx = g.max_channel(x);
    let cat = g.concat_channel(avg, mx);
    let k = g.value(convw).shape()[2];
    let conv = g.conv2d(cat, convw, convb, k / 2);
    let gate = g.sigmoid(conv);
    g.gate_spatial(gate, x)
}

fn attention_pair(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let refined = channel_attention_graph(
        g,
        x,
        p.get(&format!("{prefix}.ch.fc1.w")),
        p.get(&format!("{prefix}.ch.fc1.b")),
        p.get(&format!("{prefix}.ch.fc2.w")),
        p.get(&format!("{prefix}.ch.fc2.b")),
    );
    spatial_attention_graph(
        g,
        refined,
        p.get(&format!("{prefix}.sp.conv.w")),
        p.get(&format!("{prefix}.sp.conv.b")),
    )
}

fn conv_block(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let c = g.conv2d(
        x,
        p.get(&format!("{prefix}.conv.w")),
        p.get(&format!("{prefix}.conv.b")),
        1,
    );
    let a = g.affine_channel(
        c,
        p.get(&format!("{prefix}.scale")),
        p.get(&format!("{prefix}.shift")),
    );
    let r = g.relu(a);
    g.max_pool2(r)
}

fn residual_stage(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let mut cur = x;
    for (i, suffix) in ["1", "2", "3"].iter().enumerate() {
        let c = g.conv2d(
            cur,
            p.get(&format!("{prefix}.conv{suffix}.w")),
            p.get(&format!("{prefix}.conv{suffix}.b")),
            1,
        );
        cur = g.affine_channel(
            c,
            p.get(&format!("{prefix}.scale{suffix}")),
            p.get(&format!("{prefix}.shift{suffix}")),
        );
        if i < 2 {
            cur = g.relu(cur);
        }
    }
    let sk = g.conv2d(
        x,
        p.get(&format!("{prefix}.skip.w")),
        p.get(&format!("{prefix}.skip.b")),
        0,
    );
    let sk = g.affine_channel(
        sk,
        p.get(&format!("{prefix}.skip.scale")),
        p.get(&format!("{prefix}.skip.shift")),
    );
    let merged = g.add(cur, sk);
    let r = g.relu(merged);
    g.max_pool2(r)
}

/// Builds the full encoder. `feat_offset`, when given, is added to the final
/// feature map before pooling (the second pass of feature-space training).
pub(crate) fn encoder_graph(
    g: &mut Graph,
    p: &BoundParams,
    arch: &Arch,
    x: Var,
    feat_offset: Option<Var>,
) -> EncTrace {
    let mut taps = Vec::new();
    let mut cur = x;
    for stage in 1..=4usize {
        let prefix = match arch.backbone {
            Backbone::Conv4Attn => format!("enc.block{stage}"),
            Backbone::Resnet12Attn => format!("enc.stage{stage}"),
        };
        cur = match arch.backbone {
            Backbone::Conv4Attn => conv_block(g, p, &prefix, cur),
            Backbone::Resnet12Attn => residual_stage(g, p, &prefix, cur),
        };
        taps.push((prefix, cur));
        if arch.attention && (stage == 2 || stage == 4) {
            cur = attention_pair(g, p, &format!("enc.attn{stage}"), cur);
            taps.push((format!("enc.attn{stage}"), cur));
        }
    }
    let feat = cur;
    let fed = match feat_offset {
        Some(off) => g.add(feat, off),
        None => feat,
    };
    let pooled = g.mean_spatial(fed);
    let mu = g.linear(
        pooled,
        p.get("enc.head.mu.w"),
        p.get("enc.head.mu.b"),
    );
    let logvar = g.linear(
        pooled,
        p.get("enc.head.logvar.w"),
        p.get("enc.head.logvar.b"),
    );
    let ev = g.exp(logvar);
    let var = g.add_scalar(ev, VAR_FLOOR);
    taps.push(("enc.head.mu".to_string(), mu));
    taps.push(("enc.head.var".to_string(), var));
    EncTrace {
        mu,
        var,
        feat,
        pooled,
        taps,
    }
}

/// Builds the decoder from latent rows `[n, d]` to images `[n, c, h, w]`.
pub(crate) fn decoder_graph(
    g: &mut Graph,
    p: &BoundParams,
    arch: &Arch,
    z: Var,
) -> (Var, Vec<(String, Var)>) {
    let n = g.value(z).shape()[0];
    let (hf, wf) = arch.final_dims();
    let mut taps = Vec::new();
    let fc = g.linear(z, p.get("dec.fc.w"), p.get("dec.fc.b"));
    let fc = g.relu(fc);
    let mut cur = g.reshape(fc, vec![n, arch.widths[3], hf, wf]);
    taps.push(("dec.fc".to_string(), cur));
    let pre = arch.pre_pool_dims();
    for i in 0..4usize {
        let (th, tw) = pre[3 - i];
        cur = g.resize_nearest(cur, th, tw);
        cur = g.conv2d(
            cur,
            p.get(&format!("dec.stage{}.conv.w", i + 1)),
            p.get(&format!("dec.stage{}.conv.b", i + 1)),
            1,
        );
        cur = if i == 3 { g.sigmoid(cur) } else { g.relu(cur) };
        taps.push((format!("dec.stage{}", i + 1), cur));
    }
    (cur, taps)
}

/// Fails with the first layer whose activations contain NaN or infinity.
pub(crate) fn check_taps(g: &Graph, taps: &[(String, Var)]) -> Result<()> {
    for (name, v) in taps {
        if !g.value(*v).all_finite() {
            return Err(Error::numeric(format!(
                "non-finite activation after {name}"
            )));
        }
    }
    Ok(())
}

fn validate_image_batch(state: &ModelState, x: &Tensor) -> Result<usize> {
    let arch = state.arch();
    let (b, c, h, w) = x.dims4()?;
    if (c, h, w) != (arch.in_channels, arch.height, arch.width) {
        return Err(Error::contract(format!(
            "input batch is [{b}, {c}, {h}, {w}], architecture expects [*, {}, {}, {}]",
            arch.in_channels, arch.height, arch.width
        )));
    }
    for &v in x.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!(
                "input values must lie in [0, 1], found {v}"
            )));
        }
    }
    Ok(b)
}

/// One record's encoding: a diagonal-Gaussian posterior plus the
/// attention-refined final feature map `[channels, h, w]`.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub posterior: DiagGaussian,
    pub final_feature_map: Tensor,
}

/// Encodes a batch `[B, C, H, W]` of images with values in `[0, 1]`.
pub fn encode(state: &ModelState, x: &Tensor) -> Result<Vec<EncodeOutput>> {
    let b = validate_image_batch(state, x)?;
    let mut g = Graph::new();
    let p = bind_params(&mut g, state, false);
    let xv = g.constant(x.clone());
    let trace = encoder_graph(&mut g, &p, state.arch(), xv, None);
    check_taps(&g, &trace.taps)?;
    let feat = g.value(trace.feat);
    let (_, c, h, w) = feat.dims4()?;
    let (mu, var) = (g.value(trace.mu), g.value(trace.var));
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let posterior = DiagGaussian::new(mu.row(i).to_vec(), var.row(i).to_vec())?;
        let start = i * c * h * w;
        let map = Tensor::new(
            vec![c, h, w],
            feat.data()[start..start + c * h * w].to_vec(),
        )?;
        out.push(EncodeOutput {
            posterior,
            final_feature_map: map,
        });
    }
    Ok(out)
}

/// Globally averaged encoder features (pre-head), one row per record.
pub fn pooled_features(state: &ModelState, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let b = validate_image_batch(state, x)?;
    let mut g = Graph::new();
    let p = bind_params(&mut g, state, false);
    let xv = g.constant(x.clone());
    let trace = encoder_graph(&mut g, &p, state.arch(), xv, None);
    check_taps(&g, &trace.taps)?;
    let pooled = g.value(trace.pooled);
    Ok((0..b).map(|i| pooled.row(i).to_vec()).collect())
}

/// Decodes latent rows `[n, d]` to images `[n, c, h, w]` in `(0, 1)`.
pub fn decode_batch(state: &ModelState, z: &Tensor) -> Result<Tensor> {
    let arch = state.arch();
    let (_, d) = z.dims2()?;
    if d != arch.latent_dim {
        return Err(Error::contract(format!(
            "latent rows have dim {d}, architecture expects {}",
            arch.latent_dim
        )));
    }
    if !z.all_finite() {
        return Err(Error::contract("latent input contains non-finite values"));
    }
    let mut g = Graph::new();
    let p = bind_params(&mut g, state, false);
    let zv = g.constant(z.clone());
    let (out, taps) = decoder_graph(&mut g, &p, arch, zv);
    check_taps(&g, &taps)?;
    Ok(g.value(out).clone())
}

/// Decodes a single latent vector to one image `[c, h, w]`.
pub fn decode(state: &ModelState, z: &[f64]) -> Result<Tensor> {
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let out = decode_batch(state, &zt)?;
    let (_, c, h, w) = out.dims4()?;
    out.reshaped(vec![c, h, w])
}

fn validate_rank4(name: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if !t.all_finite() {
        return Err(Error::contract(format!("{name} contains non-finite values")));
    }
    t.dims4()
}

/// Channel attention as a standalone op: squeeze (mean and max over space),
/// shared two-layer MLP, sigmoid gate, channel-wise rescale.
pub fn channel_attention(
    x: &Tensor,
    fc1w: &Tensor,
    fc1b: &Tensor,
    fc2w: &Tensor,
    fc2b: &Tensor,
) -> Result<Tensor> {
    let (_, c, _, _) = validate_rank4("input", x)?;
    let (c1, hidden) = fc1w.dims2()?;
    let (h2, c2) = fc2w.dims2()?;
    if c1 != c || c2 != c || h2 != hidden {
        return Err(Error::contract(format!(
            "attention MLP shapes {:?}/{:?} do not match {c} channels",
            fc1w.shape(),
            fc2w.shape()
        )));
    }
    if fc1b.shape() != [hidden] || fc2b.shape() != [c] {
        return Err(Error::contract("attention MLP bias shapes are wrong"));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars: Vec<Var> = [fc1w, fc1b, fc2w, fc2b]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let out = channel_attention_graph(&mut g, xv, vars[0], vars[1], vars[2], vars[3]);
    Ok(g.value(out).clone())
}

/// Spatial attention as a standalone op: channel mean/max stack, odd-sized
/// conv to one map, sigmoid gate, pixel-wise rescale.
pub fn spatial_attention(x: &Tensor, convw: &Tensor, convb: &Tensor) -> Result<Tensor> {
    validate_rank4("input", x)?;
    let (co, ci, kh, kw) = convw.dims4()?;
    if co != 1 || ci != 2 || kh != kw || kh % 2 == 0 {
        return Err(Error::contract(format!(
            "spatial attention conv must be [1, 2, k, k] with odd k, got {:?}",
            convw.shape()
        )));
    }
    if convb.shape() != [1] {
        return Err(Error::contract("spatial attention bias must be [1]"));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(convw.clone());
    let bv = g.constant(convb.clone());
    let out = spatial_attention_graph(&mut g, xv, wv, bv);
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_arch;
    use super::super::{param_specs, ModelState};
    use super::*;
    use crate::gradcheck::{fd_grads, rel_err};
    use crate::rng::{rng_from_seed, standard_normals};

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let n = shape.iter().product();
        let mut rng = rng_from_seed(seed);
        Tensor::new(shape, standard_normals(&mut rng, n)).unwrap()
    }

    fn sigmoid(v: f64) -> f64 {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    }

    /// Naive scalar-loop channel attention, written independently of the
    /// graph ops.
    fn channel_attention_naive(
        x: &Tensor,
        fc1w: &Tensor,
        fc1b: &Tensor,
        fc2w: &Tensor,
        fc2b: &Tensor,
    ) -> Tensor {
        let (bs, c, h, w) = x.dims4().unwrap();
        let hidden = fc1b.numel();
        let mut out = vec![0.0; bs * c * h * w];
        for b in 0..bs {
            let mut avg = vec![0.0; c];
            let mut mx = vec![f64::NEG_INFINITY; c];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x.data()[x.idx4(b, ch, y, xx)];
                        avg[ch] += v / (h * w) as f64;
                        if v > mx[ch] {
                            mx[ch] = v;
                        }
                    }
                }
            }
            let mlp = |inp: &[f64]| -> Vec<f64> {
                let mut hid = vec![0.0; hidden];
                for j in 0..hidden {
                    let mut s = fc1b.data()[j];
                    for (i, &v) in inp.iter().enumerate() {
                        s += v * fc1w.data()[i * hidden + j];
                    }
                    hid[j] = s.max(0.0);
                }
                let mut o = vec![0.0; c];
                for j in 0..c {
                    let mut s = fc2b.data()[j];
                    for (i, &v) in hid.iter().enumerate() {
                        s += v * fc2w.data()[i * c + j];
                    }
                    o[j] = s;
                }
                o
            };
            let oa = mlp(&avg);
            let om = mlp(&mx);
            for ch in 0..c {
                let gate = sigmoid(oa[ch] + om[ch]);
                for y in 0..h {
                    for xx in 0..w {
                        let idx = x.idx4(b, ch, y, xx);
                        out[idx] = gate * x.data()[idx];
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    /// Naive scalar-loop spatial attention.
    fn spatial_attention_naive(x: &Tensor, convw: &Tensor, convb: &Tensor) -> Tensor {
        let (bs, c, h, w) = x.dims4().unwrap();
        let k = convw.shape()[2];
        let pad = k / 2;
        let mut out = vec![0.0; bs * c * h * w];
        for b in 0..bs {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = convb.data()[0];
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as i64 + ky as i64 - pad as i64;
                            let sx = xx as i64 + kx as i64 - pad as i64;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            let (sy, sx) = (sy as usize, sx as usize);
                            let mut avg = 0.0;
                            let mut mx = f64::NEG_INFINITY;
                            for ch in 0..c {
                                let v = x.data()[x.idx4(b, ch, sy, sx)];
                                avg += v / c as f64;
                                if v > mx {
                                    mx = v;
                                }
                            }
                            s += avg * convw.data()[ky * k + kx];
                            s += mx * convw.data()[k * k + ky * k + kx];
                        }
                    }
                    let gate = sigmoid(s);
                    for ch in 0..c {
                        let idx = x.idx4(b, ch, y, xx);
                        out[idx] = gate * x.data()[idx];
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn channel_attention_matches_naive_reference() {
        let x = rand_tensor(vec![2, 6, 5, 4], 11);
        let fc1w = rand_tensor(vec![6, 3], 12);
        let fc1b = rand_tensor(vec![3], 13);
        let fc2w = rand_tensor(vec![3, 6], 14);
        let fc2b = rand_tensor(vec![6], 15);
        let got = channel_attention(&x, &fc1w, &fc1b, &fc2w, &fc2b).unwrap();
        let want = channel_attention_naive(&x, &fc1w, &fc1b, &fc2w, &fc2b);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn spatial_attention_matches_naive_reference() {
        let x = rand_tensor(vec![2, 5, 6, 6], 21);
        let convw = rand_tensor(vec![1, 2, 7, 7], 22);
        let convb = rand_tensor(vec![1], 23);
        let got = spatial_attention(&x, &convw, &convb).unwrap();
        let want = spatial_attention_naive(&x, &convw, &convb);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_ops_validate_shapes() {
        let x = rand_tensor(vec![1, 4, 3, 3], 1);
        let bad = channel_attention(
            &x,
            &rand_tensor(vec![5, 2], 2),
            &rand_tensor(vec![2], 3),
            &rand_tensor(vec![2, 4], 4),
            &rand_tensor(vec![4], 5),
        );
        assert!(bad.is_err());
        let bad = spatial_attention(&x, &rand_tensor(vec![1, 2, 6, 6], 6), &rand_tensor(vec![1], 7));
        assert!(bad.is_err(), "even kernel must be rejected");
    }

    #[test]
    fn zero_state_encodes_to_standard_head() {
        // All-zero parameters: every conv emits zero, gates are sigmoid(0),
        // the pooled vector is zero, so mu = 0 and var = exp(0) + floor.
        let state = ModelState::zeros(small_arch()).unwrap();
        let x = Tensor::full(vec![2, 1, 8, 8], 0.25);
        let out = encode(&state, &x).unwrap();
        assert_eq!(out.len(), 2);
        for rec in &out {
            assert!(rec.posterior.mean().iter().all(|&m| m == 0.0));
            assert!(rec.posterior.var().iter().all(|&v| v == 1.0 + VAR_FLOOR));
            assert!(rec.final_feature_map.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mu_head_bias_passes_through_on_zero_state() {
        let mut state = ModelState::zeros(small_arch()).unwrap();
        state
            .set_param(
                "enc.head.mu.b",
                Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(),
            )
            .unwrap();
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        let out = encode(&state, &x).unwrap();
        assert_eq!(out[0].posterior.mean(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn zero_state_decodes_to_half_gray() {
        // Zero weights and biases end at sigmoid(0) = 0.5 everywhere.
        let state = ModelState::zeros(small_arch()).unwrap();
        let img = decode(&state, &[0.4, -1.0, 2.0]).unwrap();
        assert_eq!(img.shape(), &[1, 8, 8]);
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let state = ModelState::init(small_arch(), 5).unwrap();
        let wrong_shape = Tensor::zeros(vec![1, 1, 8, 7]);
        assert!(encode(&state, &wrong_shape).is_err());
        let out_of_range = Tensor::full(vec![1, 1, 8, 8], 1.5);
        assert!(encode(&state, &out_of_range).is_err());
        let negative = Tensor::full(vec![1, 1, 8, 8], -0.1);
        assert!(encode(&state, &negative).is_err());
    }

    #[test]
    fn decode_rejects_bad_latents() {
        let state = ModelState::init(small_arch(), 5).unwrap();
        assert!(decode(&state, &[0.0; 4]).is_err(), "wrong latent dim");
        assert!(decode(&state, &[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn overflowing_activation_is_reported_with_layer_name() {
        let mut state = ModelState::init(small_arch(), 5).unwrap();
        state
            .set_param("enc.head.logvar.b", Tensor::full(vec![3], 1.0e4))
            .unwrap();
        let x = Tensor::full(vec![1, 1, 8, 8], 0.5);
        let err = encode(&state, &x).unwrap_err().to_string();
        assert!(err.contains("enc.head.var"), "got: {err}");
    }

    #[test]
    fn batch_encoding_matches_single_records() {
        let state = ModelState::init(small_arch(), 7).unwrap();
        let mut rng = rng_from_seed(99);
        let vals: Vec<f64> = standard_normals(&mut rng, 2 * 64)
            .into_iter()
            .map(|v| sigmoid(v))
            .collect();
        let batch = Tensor::new(vec![2, 1, 8, 8], vals.clone()).unwrap();
        let one = Tensor::new(vec![1, 1, 8, 8], vals[..64].to_vec()).unwrap();
        let two = Tensor::new(vec![1, 1, 8, 8], vals[64..].to_vec()).unwrap();
        let all = encode(&state, &batch).unwrap();
        let a = encode(&state, &one).unwrap();
        let b = encode(&state, &two).unwrap();
        assert_eq!(all[0].posterior.mean(), a[0].posterior.mean());
        assert_eq!(all[0].posterior.var(), a[0].posterior.var());
        assert_eq!(all[1].posterior.mean(), b[0].posterior.mean());
        assert_eq!(all[1].posterior.var(), b[0].posterior.var());
        assert_eq!(
            all[1].final_feature_map.data(),
            b[0].final_feature_map.data()
        );
    }

    #[test]
    fn decode_shapes_track_architecture() {
        for (latent, hw) in [(3usize, 8usize), (5, 12)] {
            let mut arch = small_arch();
            arch.latent_dim = latent;
            arch.height = hw;
            arch.width = hw;
            let state = ModelState::init(arch, 2).unwrap();
            let img = decode(&state, &vec![0.1; latent]).unwrap();
            assert_eq!(img.shape(), &[1, hw, hw]);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// End-to-end finite-difference check: a scalar built from mu, var, and
    /// the decoded image must have tape gradients matching central
    /// differences for every parameter of the micro architecture.
    #[test]
    fn full_net_gradients_match_fd() {
        let arch = small_arch();
        let state = ModelState::init(arch.clone(), 31).unwrap();
        let mut rng = rng_from_seed(77);
        let x = Tensor::new(
            vec![2, 1, 8, 8],
            standard_normals(&mut rng, 128)
                .into_iter()
                .map(sigmoid)
                .collect(),
        )
        .unwrap();
        let names: Vec<String> = param_specs(&arch).iter().map(|s| s.name.clone()).collect();

        let loss_of = |tensors: &[Tensor]| -> f64 {
            let params = names
                .iter()
                .cloned()
                .zip(tensors.iter().cloned())
                .collect();
            let st = ModelState::from_params(arch.clone(), params).unwrap();
            let mut g = Graph::new();
            let p = bind_params(&mut g, &st, false);
            let xv = g.constant(x.clone());
            let tr = encoder_graph(&mut g, &p, &arch, xv, None);
            let (dec, _) = decoder_graph(&mut g, &p, &arch, tr.mu);
            let s1 = g.sum(tr.mu);
            let s2 = g.sum(tr.var);
            let s3 = g.sum(dec);
            let t = g.mul_scalar(s2, 0.5);
            let u = g.mul_scalar(s3, 0.25);
            let a = g.add(s1, t);
            let root = g.add(a, u);
            g.value(root).scalar_value()
        };

        let at: Vec<Tensor> = names.iter().map(|n| state.param(n).unwrap().clone()).collect();

        let mut g = Graph::new();
        let p = bind_params(&mut g, &state, true);
        let xv = g.constant(x.clone());
        let tr = encoder_graph(&mut g, &p, &arch, xv, None);
        let (dec, _) = decoder_graph(&mut g, &p, &arch, tr.mu);
        let s1 = g.sum(tr.mu);
        let s2 = g.sum(tr.var);
        let s3 = g.sum(dec);
        let t = g.mul_scalar(s2, 0.5);
        let u = g.mul_scalar(s3, 0.25);
        let a = g.add(s1, t);
        let root = g.add(a, u);
        let grads = g.backward(root);
        let name_to_var: BTreeMap<&String, Var> = p.iter().map(|(n, v)| (n, v)).collect();

        let fd = fd_grads(loss_of, &at, 1e-5);
        for (i, name) in names.iter().enumerate() {
            let v = name_to_var[name];
            let got = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(at[i].shape().to_vec()));
            let err = rel_err(&got, &fd[i]);
            assert!(err < 2e-4, "param {name}: rel err {err}");
        }
    }
}
