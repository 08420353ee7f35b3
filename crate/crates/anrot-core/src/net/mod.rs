//! Encoder-decoder with channel and spatial attention.
//!
//! The encoder maps `[B, C, H, W]` images to diagonal-Gaussian posteriors
//! via four conv stages, an attention pair (channel gate, then spatial gate)
//! after stages 2 and 4, global average pooling, and two linear heads
//! (mean and log-variance). The decoder mirrors the stage schedule with
//! nearest-neighbor upsampling and a final sigmoid.
//!
//! Normalization layers are replaced by per-channel learnable scale/shift so
//! forward passes are plain differentiable arithmetic (no train/eval modes,
//! exact finite-difference checks).

mod checkpoint;
mod forward;

pub use checkpoint::{load, save};
pub use forward::{
    channel_attention, decode, decode_batch, encode, pooled_features, spatial_attention,
    EncodeOutput,
};
pub(crate) use forward::{
    bind_params, check_taps, decoder_graph, encoder_graph,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normals};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "conv4-attn")]
    Conv4Attn,
    #[serde(rename = "resnet12-attn")]
    Resnet12Attn,
}

impl Backbone {
    pub fn id(&self) -> &'static str {
        match self {
            Backbone::Conv4Attn => "conv4-attn",
            Backbone::Resnet12Attn => "resnet12-attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv4-attn" => Ok(Backbone::Conv4Attn),
            "resnet12-attn" => Ok(Backbone::Resnet12Attn),
            other => Err(Error::contract(format!(
                "unknown backbone {other:?} (expected conv4-attn or resnet12-attn)"
            ))),
        }
    }
}

/// Architecture descriptor; fully determines every parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub backbone: Backbone,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel widths of the four stages.
    pub widths: [usize; 4],
    pub latent_dim: usize,
    /// Channel-attention bottleneck ratio; must divide the attention-site
    /// widths.
    pub reduction: usize,
    pub attention: bool,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::contract("input dims must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::contract("latent dim must be positive"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::contract("stage widths must be positive"));
        }
        if self.reduction == 0 {
            return Err(Error::contract("reduction ratio must be positive"));
        }
        if self.attention {
            for site in [1usize, 3] {
                if self.widths[site] % self.reduction != 0 {
                    return Err(Error::contract(format!(
                        "reduction {} must divide attention-site width {}",
                        self.reduction, self.widths[site]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial dims entering each stage's 2x2 pool (stage conv keeps dims).
    pub fn pre_pool_dims(&self) -> [(usize, usize); 4] {
        let mut dims = [(0, 0); 4];
        let (mut h, mut w) = (self.height, self.width);
        for d in &mut dims {
            *d = (h, w);
            h = (h / 2).max(1);
            w = (w / 2).max(1);
        }
        dims
    }

    /// Spatial dims of the final feature map (after the 4th pool).
    pub fn final_dims(&self) -> (usize, usize) {
        let (h, w) = self.pre_pool_dims()[3];
        ((h / 2).max(1), (w / 2).max(1))
    }
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    One,
    Zero,
}

fn conv_spec(name: String, co: usize, ci: usize, k: usize) -> [ParamSpec; 2] {
    let fan_in = (ci * k * k) as f64;
    [
        ParamSpec {
            name: format!("{name}.w"),
            shape: vec![co, ci, k, k],
            init: Init::Normal((2.0 / fan_in).sqrt()),
        },
        ParamSpec {
            name: format!("{name}.b"),
            shape: vec![co],
            init: Init::Zero,
        },
    ]
}

fn linear_spec(name: String, fan_in: usize, out: usize, gain: f64) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.w"),
            shape: vec![fan_in, out],
            init: Init::Normal((gain / fan_in as f64).sqrt()),
        },
        ParamSpec {
            name: format!("{name}.b"),
            shape: vec![out],
            init: Init::Zero,
        },
    ]
}

fn affine_spec(prefix: &str, suffix: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{prefix}.scale{suffix}"),
            shape: vec![c],
            init: Init::One,
        },
        ParamSpec {
            name: format!("{prefix}.shift{suffix}"),
            shape: vec![c],
            init: Init::Zero,
        },
    ]
}

fn attention_specs(prefix: &str, c: usize, r: usize, out: &mut Vec<ParamSpec>) {
    let hidden = c / r;
    out.extend(linear_spec(format!("{prefix}.ch.fc1"), c, hidden, 2.0));
    out.extend(linear_spec(format!("{prefix}.ch.fc2"), hidden, c, 1.0));
    out.extend(conv_spec(format!("{prefix}.sp.conv"), 1, 2, 7));
}

/// Canonical parameter catalog for an architecture; the single source of
/// truth for initialization, checkpoint validation, and counting.
pub(crate) fn param_specs(arch: &Arch) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let w = arch.widths;
    let mut prev = arch.in_channels;
    for (i, &wi) in w.iter().enumerate() {
        let stage = i + 1;
        match arch.backbone {
            Backbone::Conv4Attn => {
                let prefix = format!("enc.block{stage}");
                specs.extend(conv_spec(format!("{prefix}.conv"), wi, prev, 3));
                specs.extend(affine_spec(&prefix, "", wi));
            }
            Backbone::Resnet12Attn => {
                let prefix = format!("enc.stage{stage}");
                specs.extend(conv_spec(format!("{prefix}.conv1"), wi, prev, 3));
                specs.extend(affine_spec(&prefix, "1", wi));
                specs.extend(conv_spec(format!("{prefix}.conv2"), wi, wi, 3));
                specs.extend(affine_spec(&prefix, "2", wi));
                specs.extend(conv_spec(format!("{prefix}.conv3"), wi, wi, 3));
                specs.extend(affine_spec(&prefix, "3", wi));
                specs.extend(conv_spec(format!("{prefix}.skip"), wi, prev, 1));
                specs.extend(affine_spec(&format!("{prefix}.skip"), "", wi));
            }
        }
        if arch.attention && (stage == 2 || stage == 4) {
            attention_specs(&format!("enc.attn{stage}"), wi, arch.reduction, &mut specs);
        }
        prev = wi;
    }

    specs.extend(linear_spec("enc.head.mu".into(), w[3], arch.latent_dim, 1.0));
    specs.extend(linear_spec(
        "enc.head.logvar".into(),
        w[3],
        arch.latent_dim,
        1.0,
    ));

    let (hf, wf) = arch.final_dims();
    specs.extend(linear_spec(
        "dec.fc".into(),
        arch.latent_dim,
        w[3] * hf * wf,
        2.0,
    ));
    let dec_out = [w[2], w[1], w[0], arch.in_channels];
    let mut dec_prev = w[3];
    for (i, &co) in dec_out.iter().enumerate() {
        specs.extend(conv_spec(format!("dec.stage{}.conv", i + 1), co, dec_prev, 3));
        dec_prev = co;
    }
    specs
}

/// All learnable parameters plus the architecture that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Arch,
    params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Deterministic initialization: each parameter draws from its own
    /// seed stream derived from (seed, catalog position).
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        for (i, spec) in param_specs(&arch).iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Normal(std) => {
                    let mut rng = rng_from_seed(derive_seed(seed, i as u64));
                    standard_normals(&mut rng, n)
                        .into_iter()
                        .map(|v| v * std)
                        .collect()
                }
                Init::One => vec![1.0; n],
                Init::Zero => vec![0.0; n],
            };
            params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?);
        }
        Ok(ModelState { arch, params })
    }

    /// All-zero parameters (scale/shift included); for hand-traceable tests.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let params = param_specs(&arch)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(s.shape)))
            .collect();
        Ok(ModelState { arch, params })
    }

    /// Builds a state from explicit tensors, validating the full catalog.
    pub fn from_params(arch: Arch, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let specs = param_specs(&arch);
        if params.len() != specs.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::contract(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::numeric(format!(
                    "parameter {} contains non-finite values",
                    spec.name
                )));
            }
        }
        Ok(ModelState { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    /// Replaces one parameter tensor; shape must match.
    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::contract(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    /// One SGD step: `p -= lr * grad` for every named gradient.
    pub fn apply_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape mismatch for {name}"
                )));
            }
            p.add_scaled(g, -lr);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_total(&self.params)
    }

    /// Counts per named group (first two dotted segments).
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for (name, t) in &self.params {
            let group = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            *groups.entry(group).or_insert(0) += t.numel();
        }
        groups.into_iter().collect()
    }
}

/// Total scalar count over any named-tensor collection.
pub fn param_total(params: &BTreeMap<String, Tensor>) -> usize {
    params.values().map(Tensor::numel).sum()
}
