//! Run configuration: a flat set of dotted keys with typed values.
//!
//! One schema drives everything — the file parser, the `--set` overrides,
//! the `--help` key listing, and the manifest serialization — so the four
//! can never drift apart. Config files are line-oriented `key = value`
//! with `#` starting a full-line comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::CliError;

/// Resolved configuration for one run. Field order matches [`SCHEMA`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data_synthetic: bool,
    pub data_path: String,
    pub data_seed: u64,
    pub data_classes: [usize; 3],
    pub data_per_class: usize,
    pub data_dims: [usize; 3],
    pub data_separation: f64,
    pub data_noise: f64,
    pub model_backbone: String,
    pub model_widths: [usize; 4],
    pub model_latent_dim: usize,
    pub model_reduction: usize,
    pub model_attention: bool,
    pub episode_n_way: usize,
    pub episode_k_shot: usize,
    pub episode_n_query: usize,
    pub train_episodes: usize,
    pub train_lr: f64,
    pub train_temperature: f64,
    pub loss_lambda1: f64,
    pub loss_lambda2: f64,
    pub loss_lambda3: f64,
    pub penalty_family: String,
    pub penalty_lambda: f64,
    pub robust_epsilon: f64,
    pub robust_sigma: f64,
    pub robust_mix: [f64; 3],
    pub robust_space: String,
    pub eval_model: String,
    pub eval_episodes: usize,
    pub sweep_kind: String,
    pub sweep_levels: Vec<f64>,
    pub sweep_episodes: usize,
    pub sweep_trained_robust: bool,
    pub fid_extractor: String,
    pub gradcam_class: usize,
    pub gradcam_records: Vec<usize>,
    pub ablate_episodes: usize,
    pub ablate_lambda3: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "anrot-out".into(),
            data_synthetic: true,
            data_path: String::new(),
            data_seed: 1234,
            data_classes: [8, 2, 8],
            data_per_class: 24,
            data_dims: [1, 12, 12],
            data_separation: 0.85,
            data_noise: 0.05,
            model_backbone: "conv4-attn".into(),
            model_widths: [16, 32, 32, 32],
            model_latent_dim: 16,
            model_reduction: 4,
            model_attention: true,
            episode_n_way: 5,
            episode_k_shot: 1,
            episode_n_query: 5,
            train_episodes: 2000,
            train_lr: 0.001,
            train_temperature: 1.0,
            loss_lambda1: 0.5,
            loss_lambda2: 1.0,
            loss_lambda3: 0.0,
            penalty_family: "hellinger-elbo".into(),
            penalty_lambda: 1.0,
            robust_epsilon: 0.05,
            robust_sigma: 0.05,
            robust_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            robust_space: "feature".into(),
            eval_model: String::new(),
            eval_episodes: 100,
            sweep_kind: "adversarial".into(),
            sweep_levels: vec![0.0, 0.05, 0.1, 0.2, 0.3],
            sweep_episodes: 100,
            sweep_trained_robust: false,
            fid_extractor: "pooled".into(),
            gradcam_class: 0,
            gradcam_records: vec![0, 1, 2, 3],
            ablate_episodes: 400,
            ablate_lambda3: 1.0,
        }
    }
}

/// One entry in the key table: everything `--help` prints about it.
pub struct KeySpec {
    pub key: &'static str,
    pub help: &'static str,
}

// The macro instantiates the key table plus the set/get pair from one list,
// so a key can't exist without a parser, a serializer, and a help line.
macro_rules! schema {
    ($(($key:literal, $field:ident, $kind:ident, $help:literal)),+ $(,)?) => {
        /// Every accepted configuration key with its help text.
        pub const SCHEMA: &[KeySpec] = &[
            $(KeySpec { key: $key, help: $help }),+
        ];

        /// Applies one `key = value` assignment. The error message names the
        /// expected type; unknown keys list the whole schema.
        pub fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
            match key {
                $($key => {
                    cfg.$field = parse_value!($kind, $key, value)?;
                    Ok(())
                })+
                _ => {
                    let known: Vec<&str> = SCHEMA.iter().map(|k| k.key).collect();
                    Err(format!(
                        "unknown key `{key}`; valid keys: {}",
                        known.join(", ")
                    ))
                }
            }
        }

        /// Canonical string form of one key's current value; the form parses
        /// back to an identical configuration.
        pub fn get_key(cfg: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(render_value!($kind, cfg.$field)),)+
                _ => None,
            }
        }
    };
}

macro_rules! parse_value {
    (u64, $key:literal, $v:expr) => {
        $v.parse::<u64>()
            .map_err(|_| format!("key `{}` expects an unsigned integer, got `{}`", $key, $v))
    };
    (usize, $key:literal, $v:expr) => {
        $v.parse::<usize>()
            .map_err(|_| format!("key `{}` expects an unsigned integer, got `{}`", $key, $v))
    };
    (f64, $key:literal, $v:expr) => {
        $v.parse::<f64>()
            .map_err(|_| format!("key `{}` expects a real number, got `{}`", $key, $v))
    };
    (bool, $key:literal, $v:expr) => {
        match $v {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("key `{}` expects true or false, got `{}`", $key, other)),
        }
    };
    (string, $key:literal, $v:expr) => {
        Ok::<String, String>($v.to_string())
    };
    (usize3, $key:literal, $v:expr) => {
        parse_fixed_list::<usize, 3>($key, $v, "unsigned integers")
    };
    (usize4, $key:literal, $v:expr) => {
        parse_fixed_list::<usize, 4>($key, $v, "unsigned integers")
    };
    (f64x3, $key:literal, $v:expr) => {
        parse_fixed_list::<f64, 3>($key, $v, "real numbers")
    };
    (f64list, $key:literal, $v:expr) => {
        parse_list::<f64>($key, $v, "real numbers")
    };
    (usizelist, $key:literal, $v:expr) => {
        parse_list::<usize>($key, $v, "unsigned integers")
    };
}

macro_rules! render_value {
    (string, $field:expr) => {
        $field.to_string()
    };
    (usize3, $field:expr) => {
        join_list(&$field)
    };
    (usize4, $field:expr) => {
        join_list(&$field)
    };
    (f64x3, $field:expr) => {
        join_list(&$field)
    };
    (f64list, $field:expr) => {
        join_list(&$field)
    };
    (usizelist, $field:expr) => {
        join_list(&$field)
    };
    ($kind:ident, $field:expr) => {
        format!("{}", $field)
    };
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Err(format!("key `{key}` expects comma-separated {what}, got an empty value"));
    }
    v.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| format!("key `{key}` expects comma-separated {what}, got `{part}`"))
        })
        .collect()
}

fn parse_fixed_list<T: std::str::FromStr + Copy, const N: usize>(
    key: &str,
    v: &str,
    what: &str,
) -> Result<[T; N], String> {
    let items = parse_list::<T>(key, v, what)?;
    items
        .try_into()
        .map_err(|items: Vec<T>| format!("key `{key}` expects {N} values, got {}", items.len()))
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

schema! {
    ("seed", seed, u64, "run seed: model init, episode sampling, evaluation"),
    ("out.dir", out_dir, string, "directory receiving artifacts and the manifest"),
    ("data.synthetic", data_synthetic, bool, "generate the dataset instead of reading archives"),
    ("data.path", data_path, string, "directory with train.anrt/val.anrt/test.anrt (when data.synthetic = false)"),
    ("data.seed", data_seed, u64, "seed of the synthetic dataset, independent of the run seed"),
    ("data.classes", data_classes, usize3, "synthetic class counts: meta-train,meta-val,meta-test"),
    ("data.per_class", data_per_class, usize, "synthetic records per class"),
    ("data.dims", data_dims, usize3, "image dimensions: channels,height,width"),
    ("data.separation", data_separation, f64, "synthetic class separation in [0,1]"),
    ("data.noise", data_noise, f64, "synthetic per-pixel noise standard deviation"),
    ("model.backbone", model_backbone, string, "encoder backbone: conv4-attn or resnet12-attn"),
    ("model.widths", model_widths, usize4, "channel widths of the four encoder stages"),
    ("model.latent_dim", model_latent_dim, usize, "dimension of the diagonal-Gaussian latent"),
    ("model.reduction", model_reduction, usize, "channel-attention bottleneck ratio"),
    ("model.attention", model_attention, bool, "enable the channel and spatial attention gates"),
    ("episode.n_way", episode_n_way, usize, "classes per episode"),
    ("episode.k_shot", episode_k_shot, usize, "support samples per class"),
    ("episode.n_query", episode_n_query, usize, "query samples per class"),
    ("train.episodes", train_episodes, usize, "training episodes"),
    ("train.lr", train_lr, f64, "SGD learning rate"),
    ("train.temperature", train_temperature, f64, "softmax temperature on negative squared Hellinger distances"),
    ("loss.lambda1", loss_lambda1, f64, "weight of the Hellinger-similarity contrastive loss"),
    ("loss.lambda2", loss_lambda2, f64, "weight of the reconstruction loss"),
    ("loss.lambda3", loss_lambda3, f64, "weight of the variational prior penalty"),
    ("penalty.family", penalty_family, string, "prior penalty family: hellinger-elbo, kl-elbo, or wasserstein-elbo"),
    ("penalty.lambda", penalty_lambda, f64, "scale inside the chosen penalty family"),
    ("robust.epsilon", robust_epsilon, f64, "sign-method attack magnitude"),
    ("robust.sigma", robust_sigma, f64, "gaussian corruption standard deviation"),
    ("robust.mix", robust_mix, f64x3, "training weights of the clean,adversarial,gaussian streams (sum 1)"),
    ("robust.space", robust_space, string, "attack space during training: input or feature"),
    ("eval.model", eval_model, string, "checkpoint path read by eval, sweep, fid, and gradcam"),
    ("eval.episodes", eval_episodes, usize, "evaluation episodes"),
    ("sweep.kind", sweep_kind, string, "sweep perturbation: adversarial or gaussian"),
    ("sweep.levels", sweep_levels, f64list, "perturbation strengths of the sweep"),
    ("sweep.episodes", sweep_episodes, usize, "episodes per sweep level"),
    ("sweep.trained_robust", sweep_trained_robust, bool, "tag the sweep rows as coming from a robust-trained model"),
    ("fid.extractor", fid_extractor, string, "feature extractor for FID: pooled or pixel"),
    ("gradcam.class", gradcam_class, usize, "target class position within the split, 0-based"),
    ("gradcam.records", gradcam_records, usizelist, "record indices to render"),
    ("ablate.episodes", ablate_episodes, usize, "training episodes per ablation configuration"),
    ("ablate.lambda3", ablate_lambda3, f64, "prior weight used by the KL-penalty ablation variants"),
}

/// Applies a config file on top of `cfg`. Errors carry the offending line
/// number; unknown keys list the valid ones.
pub fn apply_file(cfg: &mut RunConfig, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "{}: line {line_no}: expected `key = value`, got `{line}`",
                path.display()
            ))
        })?;
        set_key(cfg, key.trim(), value.trim()).map_err(|msg| {
            CliError::Config(format!("{}: line {line_no}: {msg}", path.display()))
        })?;
    }
    Ok(())
}

/// Applies one `--set key=value` override.
pub fn apply_set(cfg: &mut RunConfig, assignment: &str) -> Result<(String, String), CliError> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!("--set expects key=value, got `{assignment}`"))
    })?;
    let (key, value) = (key.trim(), value.trim());
    set_key(cfg, key, value).map_err(CliError::Config)?;
    Ok((key.to_string(), value.to_string()))
}

/// All keys with their current values, in schema order. Feeding each pair
/// back through [`set_key`] reproduces the configuration exactly.
pub fn key_values(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    SCHEMA
        .iter()
        .map(|spec| (spec.key, get_key(cfg, spec.key).expect("schema key")))
        .collect()
}

/// The `--help` appendix: one line per key with the default value.
pub fn keys_help() -> String {
    let defaults = RunConfig::default();
    let width = SCHEMA.iter().map(|s| s.key.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (config file lines `key = value`, `#` comments, or --set key=value):\n",
    );
    for spec in SCHEMA {
        let value = get_key(&defaults, spec.key).expect("schema key");
        writeln!(
            out,
            "  {:width$}  default {:24} {}",
            spec.key, value, spec.help
        )
        .expect("string write");
    }
    out
}
