//! Subcommand execution: resolve the configuration, validate it, call into
//! the engine, write artifacts plus the manifest.
//!
//! Precedence is defaults < config file < flags (`--set` first, then the
//! dedicated flags). Every artifact-producing run ends by writing
//! `manifest-<command>.txt` into the output directory; the manifest is a
//! valid config file, so `--config <manifest>` reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use anrot_core::episode::{
    class_prototype, evaluate, load_dataset, make_synthetic_split, save_dataset, train,
    write_training_log, ClassPrototype, Dataset, LossWeights, Split, TrainConfig,
};
use anrot_core::gauss::{
    bhattacharyya_coeff, bhattacharyya_dist, hellinger, hellinger_sq, DiagGaussian,
};
use anrot_core::metrics::{
    grad_cam, reconstruction_fid, robustness_sweep, write_heatmaps, write_sweep_csv,
    PixelFeatures, PooledFeatures, SweepKind,
};
use anrot_core::net::{encode, load as load_checkpoint, save as save_checkpoint, Arch, Backbone};
use anrot_core::robust::{FgsmSpace, RobustConfig};
use anrot_core::tensor::Tensor;
use anrot_core::variational::{PenaltyFamily, PenaltyKind};

use crate::cli::{
    Cli, Command, CommonArgs, DistArgs, EvalArgs, FidArgs, GradcamArgs, SweepArgs, TrainArgs,
};
use crate::config::{apply_file, apply_set, set_key, RunConfig};
use crate::manifest::{write_manifest, Provenance};
use crate::CliError;

/// The configuration with its provenance, ready for the manifest.
struct Resolved {
    cfg: RunConfig,
    config_file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn resolve(common: &CommonArgs, extra: &[(&str, String)]) -> Result<Resolved, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        apply_file(&mut cfg, path)?;
    }
    let mut overrides = Vec::new();
    for assignment in &common.set {
        overrides.push(apply_set(&mut cfg, assignment)?);
    }
    for (key, value) in extra {
        set_key(&mut cfg, key, value).map_err(CliError::Config)?;
        overrides.push((key.to_string(), value.clone()));
    }
    if let Some(out) = &common.out {
        let value = out.display().to_string();
        set_key(&mut cfg, "out.dir", &value).map_err(CliError::Config)?;
        overrides.push(("out.dir".to_string(), value));
    }
    if let Some(seed) = common.seed {
        set_key(&mut cfg, "seed", &seed.to_string()).map_err(CliError::Config)?;
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    Ok(Resolved {
        cfg,
        config_file: common.config.clone(),
        overrides,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn finish(resolved: &Resolved, command: &'static str, dir: &Path) -> Result<(), CliError> {
    write_manifest(
        dir,
        &resolved.cfg,
        &Provenance {
            command,
            config_file: resolved.config_file.as_deref(),
            overrides: &resolved.overrides,
        },
    )?;
    Ok(())
}

fn arch_of(cfg: &RunConfig) -> Result<Arch, CliError> {
    let backbone = match cfg.model_backbone.as_str() {
        "conv4-attn" => Backbone::Conv4Attn,
        "resnet12-attn" => Backbone::Resnet12Attn,
        other => {
            return Err(CliError::Config(format!(
                "model.backbone must be conv4-attn or resnet12-attn, got `{other}`"
            )))
        }
    };
    Ok(Arch {
        backbone,
        in_channels: cfg.data_dims[0],
        height: cfg.data_dims[1],
        width: cfg.data_dims[2],
        widths: cfg.model_widths,
        latent_dim: cfg.model_latent_dim,
        reduction: cfg.model_reduction,
        attention: cfg.model_attention,
    })
}

fn robust_of(cfg: &RunConfig) -> Result<RobustConfig, CliError> {
    let space = match cfg.robust_space.as_str() {
        "input" => FgsmSpace::Input,
        "feature" => FgsmSpace::Feature,
        other => {
            return Err(CliError::Config(format!(
                "robust.space must be input or feature, got `{other}`"
            )))
        }
    };
    let rc = RobustConfig {
        epsilon: cfg.robust_epsilon,
        sigma: cfg.robust_sigma,
        mix: cfg.robust_mix,
        space,
    };
    rc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(rc)
}

fn penalty_of(cfg: &RunConfig) -> Result<PenaltyKind, CliError> {
    let family = match cfg.penalty_family.as_str() {
        "hellinger-elbo" => PenaltyFamily::HellingerElbo,
        "kl-elbo" => PenaltyFamily::KlElbo,
        "wasserstein-elbo" => PenaltyFamily::WassersteinElbo,
        other => {
            return Err(CliError::Config(format!(
                "penalty.family must be hellinger-elbo, kl-elbo, or wasserstein-elbo, got `{other}`"
            )))
        }
    };
    PenaltyKind::new(family, cfg.penalty_lambda).map_err(|e| CliError::Config(e.to_string()))
}

fn train_config_of(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let weights = LossWeights::new(cfg.loss_lambda1, cfg.loss_lambda2, cfg.loss_lambda3)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let tc = TrainConfig {
        n_way: cfg.episode_n_way,
        k_shot: cfg.episode_k_shot,
        n_query: cfg.episode_n_query,
        episodes: cfg.train_episodes,
        lr: cfg.train_lr,
        seed: cfg.seed,
        weights,
        robust: robust_of(cfg)?,
        penalty: penalty_of(cfg)?,
        temperature: cfg.train_temperature,
    };
    tc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(tc)
}

fn synthetic_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset), CliError> {
    make_synthetic_split(
        cfg.data_classes,
        cfg.data_per_class,
        (cfg.data_dims[0], cfg.data_dims[1], cfg.data_dims[2]),
        cfg.data_separation,
        cfg.data_noise,
        cfg.data_seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))
}

fn split_file(split: Split) -> &'static str {
    match split {
        Split::MetaTrain => "train.anrt",
        Split::MetaVal => "val.anrt",
        Split::MetaTest => "test.anrt",
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    if cfg.data_synthetic {
        let (tr, val, te) = synthetic_datasets(cfg)?;
        return Ok(match split {
            Split::MetaTrain => tr,
            Split::MetaVal => val,
            Split::MetaTest => te,
        });
    }
    if cfg.data_path.is_empty() {
        return Err(CliError::Config(
            "data.path is required when data.synthetic = false".into(),
        ));
    }
    let path = Path::new(&cfg.data_path).join(split_file(split));
    if !path.exists() {
        return Err(CliError::Config(format!(
            "dataset archive {} does not exist",
            path.display()
        )));
    }
    load_dataset(&path, split).map_err(|e| CliError::Runtime(e.to_string()))
}

fn load_model(cfg: &RunConfig) -> Result<anrot_core::net::ModelState, CliError> {
    if cfg.eval_model.is_empty() {
        return Err(CliError::Config(
            "eval.model is required (checkpoint path; see `train`)".into(),
        ));
    }
    let path = Path::new(&cfg.eval_model);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    load_checkpoint(path).map_err(|e| CliError::Runtime(e.to_string()))
}

fn runtime<T>(r: anrot_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Runs one parsed invocation. Artifacts land in `out.dir`.
pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData(args) => synth_data(&args),
        Command::Train(args) => run_train(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Sweep(args) => run_sweep(&args),
        Command::Fid(args) => run_fid(&args),
        Command::Gradcam(args) => run_gradcam(&args),
        Command::Dist(args) => run_dist(&args),
        Command::Ablate(args) => run_ablate(&args),
    }
}

fn synth_data(common: &CommonArgs) -> Result<(), CliError> {
    let resolved = resolve(common, &[])?;
    let cfg = &resolved.cfg;
    let (tr, val, te) = synthetic_datasets(cfg)?;
    let dir = out_dir(cfg)?;
    for ds in [&tr, &val, &te] {
        let path = dir.join(split_file(ds.split()));
        runtime(save_dataset(ds, &path))?;
    }
    finish(&resolved, "synth-data", &dir)?;
    println!(
        "wrote {} + val/test archives ({} train records)",
        dir.join("train.anrt").display(),
        tr.len()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut extra: Vec<(&str, String)> = Vec::new();
    if args.synthetic {
        extra.push(("data.synthetic", "true".into()));
    }
    if let Some(data) = &args.data {
        extra.push(("data.synthetic", "false".into()));
        extra.push(("data.path", data.display().to_string()));
    }
    if let Some(episodes) = args.episodes {
        extra.push(("train.episodes", episodes.to_string()));
    }
    let resolved = resolve(&args.common, &extra)?;
    let cfg = &resolved.cfg;
    let tc = train_config_of(cfg)?;
    let arch = arch_of(cfg)?;
    let ds = load_split(cfg, Split::MetaTrain)?;
    let report = runtime(train(&ds, &arch, &tc))?;
    let dir = out_dir(cfg)?;
    let model_path = dir.join("model.anrc");
    runtime(save_checkpoint(&report.state, &model_path))?;
    runtime(write_training_log(&report.log, &dir.join("training_log.csv")))?;
    finish(&resolved, "train", &dir)?;
    if let Some(msg) = &report.aborted {
        eprintln!("warning: training aborted early ({msg}); checkpoint holds the last finite parameters");
    }
    println!(
        "trained {} episodes -> {}",
        report.log.len(),
        model_path.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut extra: Vec<(&str, String)> = Vec::new();
    if let Some(model) = &args.model {
        extra.push(("eval.model", model.display().to_string()));
    }
    if let Some(episodes) = args.episodes {
        extra.push(("eval.episodes", episodes.to_string()));
    }
    let resolved = resolve(&args.common, &extra)?;
    let cfg = &resolved.cfg;
    if cfg.eval_episodes < 2 {
        return Err(CliError::Config("eval.episodes must be at least 2".into()));
    }
    let state = load_model(cfg)?;
    let ds = load_split(cfg, Split::MetaTest)?;
    let report = runtime(evaluate(
        &state,
        &ds,
        cfg.episode_n_way,
        cfg.episode_k_shot,
        cfg.episode_n_query,
        cfg.eval_episodes,
        cfg.seed,
    ))?;
    let dir = out_dir(cfg)?;
    write_text(
        &dir.join("eval.csv"),
        &format!(
            "accuracy,ci95,episodes\n{},{},{}\n",
            report.accuracy, report.ci95, report.episodes
        ),
    )?;
    finish(&resolved, "eval", &dir)?;
    println!(
        "accuracy {:.4} +- {:.4} over {} episodes",
        report.accuracy, report.ci95, report.episodes
    );
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let mut extra: Vec<(&str, String)> = Vec::new();
    if let Some(model) = &args.model {
        extra.push(("eval.model", model.display().to_string()));
    }
    if let Some(kind) = &args.kind {
        extra.push(("sweep.kind", kind.clone()));
    }
    if let Some(levels) = &args.levels {
        extra.push(("sweep.levels", levels.clone()));
    }
    if args.trained_robust {
        extra.push(("sweep.trained_robust", "true".into()));
    }
    let resolved = resolve(&args.common, &extra)?;
    let cfg = &resolved.cfg;
    let kind = match cfg.sweep_kind.as_str() {
        "adversarial" => SweepKind::Adversarial,
        "gaussian" => SweepKind::Gaussian,
        other => {
            return Err(CliError::Config(format!(
                "sweep.kind must be adversarial or gaussian, got `{other}`"
            )))
        }
    };
    let state = load_model(cfg)?;
    let ds = load_split(cfg, Split::MetaTest)?;
    let curve = runtime(robustness_sweep(
        &state,
        &ds,
        cfg.episode_n_way,
        cfg.episode_k_shot,
        cfg.episode_n_query,
        kind,
        &cfg.sweep_levels,
        cfg.sweep_episodes,
        cfg.seed,
        cfg.sweep_trained_robust,
    ))?;
    let dir = out_dir(cfg)?;
    runtime(write_sweep_csv(std::slice::from_ref(&curve), &dir.join("sweep.csv")))?;
    finish(&resolved, "sweep", &dir)?;
    for (level, (acc, ci)) in cfg.sweep_levels.iter().zip(&curve.accuracy) {
        println!("{} {level}: {acc:.4} +- {ci:.4}", cfg.sweep_kind);
    }
    Ok(())
}

fn run_fid(args: &FidArgs) -> Result<(), CliError> {
    let mut extra: Vec<(&str, String)> = Vec::new();
    if let Some(model) = &args.model {
        extra.push(("eval.model", model.display().to_string()));
    }
    if let Some(extractor) = &args.extractor {
        extra.push(("fid.extractor", extractor.clone()));
    }
    let resolved = resolve(&args.common, &extra)?;
    let cfg = &resolved.cfg;
    let state = load_model(cfg)?;
    let ds = load_split(cfg, Split::MetaTest)?;
    let images = stack_records(&ds, None)?;
    let value = match cfg.fid_extractor.as_str() {
        "pooled" => runtime(reconstruction_fid(&state, &images, &PooledFeatures { state: &state })),
        "pixel" => runtime(reconstruction_fid(&state, &images, &PixelFeatures)),
        other => Err(CliError::Config(format!(
            "fid.extractor must be pooled or pixel, got `{other}`"
        ))),
    }?;
    let dir = out_dir(cfg)?;
    write_text(
        &dir.join("fid.csv"),
        &format!("extractor,fid\n{},{}\n", cfg.fid_extractor, value),
    )?;
    finish(&resolved, "fid", &dir)?;
    println!("fid {value:.6}");
    Ok(())
}

fn run_gradcam(args: &GradcamArgs) -> Result<(), CliError> {
    let mut extra: Vec<(&str, String)> = Vec::new();
    if let Some(model) = &args.model {
        extra.push(("eval.model", model.display().to_string()));
    }
    if let Some(class) = args.class {
        extra.push(("gradcam.class", class.to_string()));
    }
    if let Some(records) = &args.records {
        extra.push(("gradcam.records", records.clone()));
    }
    let resolved = resolve(&args.common, &extra)?;
    let cfg = &resolved.cfg;
    let state = load_model(cfg)?;
    let ds = load_split(cfg, Split::MetaTest)?;
    let classes = ds.classes();
    let target_class = *classes.get(cfg.gradcam_class).ok_or_else(|| {
        CliError::Config(format!(
            "gradcam.class {} out of range: the split has {} classes",
            cfg.gradcam_class,
            classes.len()
        ))
    })?;
    let prototypes = split_prototypes(&state, &ds)?;
    let images = stack_records(&ds, Some(&cfg.gradcam_records))?;
    let maps = runtime(grad_cam(&state, &images, target_class, &prototypes))?;
    let dir = out_dir(cfg)?;
    let paths = runtime(write_heatmaps(&maps, target_class, &dir))?;
    finish(&resolved, "gradcam", &dir)?;
    println!("wrote {} heatmaps into {}", paths.len(), dir.display());
    Ok(())
}

fn run_dist(args: &DistArgs) -> Result<(), CliError> {
    let p = parse_gaussian("--p", &args.p)?;
    let q = parse_gaussian("--q", &args.q)?;
    let value = match args.metric.as_str() {
        "hellinger_sq" => hellinger_sq(&p, &q),
        "hellinger" => hellinger(&p, &q),
        "bc" => bhattacharyya_coeff(&p, &q),
        "bhattacharyya" => bhattacharyya_dist(&p, &q),
        other => {
            return Err(CliError::Config(format!(
                "metric must be hellinger_sq, hellinger, bc, or bhattacharyya, got `{other}`"
            )))
        }
    };
    let value = runtime(value)?;
    println!("{:.6}", value.value);
    Ok(())
}

fn run_ablate(common: &CommonArgs) -> Result<(), CliError> {
    let resolved = resolve(common, &[])?;
    let cfg = &resolved.cfg;
    let train_ds = load_split(cfg, Split::MetaTrain)?;
    let test_ds = load_split(cfg, Split::MetaTest)?;
    let dir = out_dir(cfg)?;

    let mut csv = String::from("config,attention,hesim,penalty,accuracy,ci95\n");
    for attention in [true, false] {
        for variant in ["hesim", "kl", "none"] {
            let mut run_cfg = cfg.clone();
            run_cfg.model_attention = attention;
            run_cfg.train_episodes = cfg.ablate_episodes;
            match variant {
                "hesim" => {
                    run_cfg.loss_lambda3 = 0.0;
                }
                "kl" => {
                    run_cfg.loss_lambda1 = 0.0;
                    run_cfg.loss_lambda3 = cfg.ablate_lambda3;
                    run_cfg.penalty_family = "kl-elbo".into();
                }
                _ => {
                    run_cfg.loss_lambda1 = 0.0;
                    run_cfg.loss_lambda3 = 0.0;
                }
            }
            let tc = train_config_of(&run_cfg)?;
            let arch = arch_of(&run_cfg)?;
            let report = runtime(train(&train_ds, &arch, &tc))?;
            if let Some(msg) = &report.aborted {
                eprintln!("warning: {variant} (attention={attention}) aborted: {msg}");
            }
            let eval_report = runtime(evaluate(
                &report.state,
                &test_ds,
                cfg.episode_n_way,
                cfg.episode_k_shot,
                cfg.episode_n_query,
                cfg.eval_episodes,
                cfg.seed,
            ))?;
            let name = format!(
                "{}+{variant}",
                if attention { "attn" } else { "plain" }
            );
            println!(
                "{name}: accuracy {:.4} +- {:.4}",
                eval_report.accuracy, eval_report.ci95
            );
            csv.push_str(&format!(
                "{name},{attention},{},{},{},{}\n",
                variant == "hesim",
                if variant == "kl" { &run_cfg.penalty_family } else { "none" },
                eval_report.accuracy,
                eval_report.ci95
            ));
        }
    }
    write_text(&dir.join("ablation.csv"), &csv)?;
    finish(&resolved, "ablate", &dir)?;
    Ok(())
}

/// `mean,var` pairs flattened into one comma list: `0,1` is the 1-d standard
/// Gaussian, `0,1,2,0.5` a 2-d one.
fn parse_gaussian(flag: &str, text: &str) -> Result<DiagGaussian, CliError> {
    let values: Vec<f64> = text
        .split(',')
        .map(|part| {
            part.trim().parse::<f64>().map_err(|_| {
                CliError::Config(format!("{flag} expects comma-separated numbers, got `{part}`"))
            })
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() || values.len() % 2 != 0 {
        return Err(CliError::Config(format!(
            "{flag} expects mean,var pairs; got {} numbers",
            values.len()
        )));
    }
    let mean: Vec<f64> = values.iter().step_by(2).copied().collect();
    let var: Vec<f64> = values.iter().skip(1).step_by(2).copied().collect();
    DiagGaussian::new(mean, var).map_err(|e| CliError::Config(e.to_string()))
}

fn stack_records(ds: &Dataset, indices: Option<&[usize]>) -> Result<Tensor, CliError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let chosen: &[usize] = match indices {
        Some(list) => list,
        None => &all,
    };
    let mut records = Vec::with_capacity(chosen.len());
    for &i in chosen {
        if i >= ds.len() {
            return Err(CliError::Config(format!(
                "record index {i} out of range: the split has {} records",
                ds.len()
            )));
        }
        records.push(ds.image(i));
    }
    runtime(Tensor::stack(&records))
}

/// Class prototypes over every record of the split, keyed by the split's
/// global class ids.
fn split_prototypes(
    state: &anrot_core::net::ModelState,
    ds: &Dataset,
) -> Result<Vec<ClassPrototype>, CliError> {
    let mut prototypes = Vec::new();
    for class in ds.classes() {
        let rows = runtime(ds.class_records(class))?.to_vec();
        let images: Vec<&Tensor> = rows.iter().map(|&i| ds.image(i)).collect();
        let batch = runtime(Tensor::stack(&images))?;
        let encoded = runtime(encode(state, &batch))?;
        let posteriors: Vec<DiagGaussian> =
            encoded.into_iter().map(|e| e.posterior).collect();
        let dist = runtime(class_prototype(&posteriors))?;
        prototypes.push(ClassPrototype {
            class_id: class,
            dist,
        });
    }
    Ok(prototypes)
}
