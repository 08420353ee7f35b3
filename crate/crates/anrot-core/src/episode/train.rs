//! Episodic training: sample an episode, run its clean / adversarial /
//! gaussian variant streams on the tape, take one SGD step on the
//! mix-weighted sum of the stream losses. Sequential over episodes (the
//! parameter update is exclusive), deterministic in the seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Arch, ModelState};
use crate::rng::{derive_seed, rng_from_seed, standard_normals};
use crate::robust::{fgsm_feature, robust_batch, FgsmSpace, RobustConfig, Variant};
use crate::tensor::Tensor;
use crate::variational::PenaltyKind;

use super::tape::{build_episode_graph, EpisodeGraphSpec};
use super::{sample_episode, Dataset, LossWeights};

/// Everything one training run depends on besides the dataset and the
/// architecture.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub robust: RobustConfig,
    pub penalty: PenaltyKind,
    pub temperature: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::contract("n_way must be >= 2"));
        }
        if self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::contract("k_shot and n_query must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("lambda1", self.weights.lambda1),
            ("lambda2", self.weights.lambda2),
            ("lambda3", self.weights.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        self.robust.validate()?;
        // Re-validate in case the kind was built from raw fields.
        PenaltyKind::new(self.penalty.family, self.penalty.lambda)?;
        Ok(())
    }
}

/// One training-log line; `acc` is the episode's query accuracy under the
/// parameters that produced the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub total: f64,
    pub cce: f64,
    pub hesim: f64,
    pub rec: f64,
    pub prior: f64,
    pub acc: f64,
}

/// Result of a run: the final (or last-good) parameters, the per-episode
/// log, and the divergence message when the run aborted early.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: ModelState,
    pub log: Vec<LogRow>,
    pub aborted: Option<String>,
}

fn grads_are_finite(grads: &BTreeMap<String, Tensor>) -> bool {
    grads
        .values()
        .all(|g| g.data().iter().all(|v| v.is_finite()))
}

/// Runs episodic training from a fresh seeded initialization.
///
/// Divergence (a non-finite loss, activation, or gradient) is not an `Err`:
/// the run stops and the report carries the message plus the last parameters
/// that still produced finite values.
pub fn train(ds: &Dataset, arch: &Arch, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let init_seed = derive_seed(config.seed, 1);
    let episode_master = derive_seed(config.seed, 2);
    let mut state = ModelState::init(arch.clone(), init_seed)?;
    let mut log = Vec::with_capacity(config.episodes);

    // Each episode runs up to three parallel streams — clean, adversarial,
    // gaussian — over the same sampled support/query records. Every stream
    // builds its own prototypes from its own variant of the support set and
    // classifies its own variant of the queries; stream losses and gradients
    // are combined with the mix weights. A weight of zero skips the stream
    // entirely, so mix (1,0,0) is a plain non-robust run at one-stream cost.
    const STREAM_MIXES: [[f64; 3]; 3] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ];

    for e in 0..config.episodes {
        let ep_seed = derive_seed(episode_master, e as u64);
        let episode = sample_episode(ds, config.n_way, config.k_shot, config.n_query, ep_seed)?;

        let mut sums = LogRow {
            episode: e,
            total: 0.0,
            cce: 0.0,
            hesim: 0.0,
            rec: 0.0,
            prior: 0.0,
            acc: 0.0,
        };
        let mut acc_grads: BTreeMap<String, Tensor> = BTreeMap::new();

        for (i, &weight) in config.robust.mix.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            let stream_cfg = RobustConfig {
                mix: STREAM_MIXES[i],
                ..config.robust
            };
            let s_batch = robust_batch(
                &state,
                &episode.support_images,
                &episode.support_labels,
                &stream_cfg,
                derive_seed(ep_seed, 101 + 10 * i as u64),
            )?;
            let q_batch = robust_batch(
                &state,
                &episode.query_images,
                &episode.query_labels,
                &stream_cfg,
                derive_seed(ep_seed, 102 + 10 * i as u64),
            )?;
            let ns = s_batch.labels.len();
            let nq = q_batch.labels.len();

            let rec_noise = if config.weights.lambda2 > 0.0 {
                let mut rng = rng_from_seed(derive_seed(ep_seed, 103 + 10 * i as u64));
                Some(Tensor::new(
                    vec![nq, arch.latent_dim],
                    standard_normals(&mut rng, nq * arch.latent_dim),
                )?)
            } else {
                None
            };

            macro_rules! episode_spec {
                ($offset:expr, $track_params:expr, $track_offset:expr) => {
                    EpisodeGraphSpec {
                        support_x: &s_batch.images,
                        support_y: &s_batch.labels,
                        query_x: &q_batch.images,
                        query_y: &q_batch.labels,
                        n_classes: config.n_way,
                        weights: &config.weights,
                        penalty: &config.penalty,
                        temperature: config.temperature,
                        feat_offset: $offset,
                        rec_noise: rec_noise.as_ref(),
                        track_params: $track_params,
                        track_offset: $track_offset,
                    }
                };
            }

            // Feature-space attacks need the loss gradient at the feature
            // map, so the adversarial stream runs twice: once tracking only
            // a zero offset (cheap backward), once tracking the parameters
            // with the sign offset fixed.
            let adv_rows: Vec<usize> = {
                let mut rows = s_batch.rows_with(Variant::Adversarial);
                rows.extend(q_batch.rows_with(Variant::Adversarial).iter().map(|r| r + ns));
                rows
            };
            let two_pass = config.robust.space == FgsmSpace::Feature
                && config.robust.epsilon > 0.0
                && !adv_rows.is_empty();

            let offset = if two_pass {
                match build_episode_graph(&state, &episode_spec!(None, false, true)) {
                    Ok(eg) => {
                        let grads = eg.graph.backward(eg.total);
                        let g = grads
                            .get(eg.offset_var.expect("offset tracked"))
                            .cloned()
                            .unwrap_or_else(|| {
                                let (hf, wf) = arch.final_dims();
                                Tensor::zeros(vec![ns + nq, arch.widths[3], hf, wf])
                            });
                        Some(fgsm_feature(&g, &adv_rows, config.robust.epsilon)?)
                    }
                    Err(Error::Numeric(msg)) => {
                        return Ok(TrainReport {
                            state,
                            log,
                            aborted: Some(format!("episode {e}: {msg}")),
                        });
                    }
                    Err(other) => return Err(other),
                }
            } else {
                None
            };

            let eg =
                match build_episode_graph(&state, &episode_spec!(offset.as_ref(), true, false)) {
                    Ok(eg) => eg,
                    Err(Error::Numeric(msg)) => {
                        return Ok(TrainReport {
                            state,
                            log,
                            aborted: Some(format!("episode {e}: {msg}")),
                        });
                    }
                    Err(other) => return Err(other),
                };
            let breakdown = eg.breakdown();
            if !breakdown.total.is_finite() {
                return Ok(TrainReport {
                    state,
                    log,
                    aborted: Some(format!(
                        "episode {e}: loss diverged to {}",
                        breakdown.total
                    )),
                });
            }

            let grads = eg.graph.backward(eg.total);
            for (name, var) in &eg.param_vars {
                if let Some(g) = grads.get(*var) {
                    acc_grads
                        .entry(name.clone())
                        .and_modify(|t| t.add_scaled(g, weight))
                        .or_insert_with(|| {
                            let mut t = Tensor::zeros(g.shape().to_vec());
                            t.add_scaled(g, weight);
                            t
                        });
                }
            }

            sums.total += weight * breakdown.total;
            sums.cce += weight * breakdown.cce;
            sums.hesim += weight * breakdown.hesim;
            sums.rec += weight * breakdown.rec;
            sums.prior += weight * breakdown.prior;
            sums.acc += weight * breakdown.accuracy;
        }

        if !grads_are_finite(&acc_grads) {
            return Ok(TrainReport {
                state,
                log,
                aborted: Some(format!("episode {e}: gradient diverged")),
            });
        }
        state.apply_step(&acc_grads, config.lr)?;
        log.push(sums);
    }

    Ok(TrainReport {
        state,
        log,
        aborted: None,
    })
}

/// Writes the log as CSV. Floats use the shortest round-trip form, so the
/// file is reproducible bit-for-bit from equal runs.
pub fn write_training_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from("episode,total,cce,hesim,rec,prior,acc\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.episode, r.total, r.cce, r.hesim, r.rec, r.prior, r.acc
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::super::make_synthetic;
    use super::*;
    use crate::net::{load as load_checkpoint, save as save_checkpoint, Backbone};
    use crate::variational::PenaltyFamily;

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

    fn micro_config(episodes: usize) -> TrainConfig {
        TrainConfig {
            n_way: 2,
            k_shot: 2,
            n_query: 2,
            episodes,
            lr: 0.001,
            seed: 77,
            weights: LossWeights::default(),
            robust: RobustConfig::default(),
            penalty: PenaltyKind {
                family: PenaltyFamily::HellingerElbo,
                lambda: 1.0,
            },
            temperature: 1.0,
        }
    }

    fn micro_dataset() -> Dataset {
        make_synthetic(4, 6, (1, 8, 8), 0.9, 0.05, 13).unwrap()
    }

    #[test]
    fn zero_episodes_returns_fresh_initialization() {
        let ds = micro_dataset();
        let report = train(&ds, &micro_arch(), &micro_config(0)).unwrap();
        assert!(report.log.is_empty());
        assert!(report.aborted.is_none());
        let fresh = ModelState::init(micro_arch(), derive_seed(77, 1)).unwrap();
        for (name, p) in report.state.params() {
            assert_eq!(p.data(), fresh.param(name).unwrap().data());
        }
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let ds = micro_dataset();
        let a = train(&ds, &micro_arch(), &micro_config(3)).unwrap();
        let b = train(&ds, &micro_arch(), &micro_config(3)).unwrap();
        assert_eq!(a.log, b.log);
        for (name, p) in a.state.params() {
            assert_eq!(p.data(), b.state.param(name).unwrap().data());
        }

        let mut other = micro_config(3);
        other.seed = 78;
        let c = train(&ds, &micro_arch(), &other).unwrap();
        assert!(a.log != c.log);
    }

    #[test]
    fn parameters_actually_move() {
        let ds = micro_dataset();
        let report = train(&ds, &micro_arch(), &micro_config(2)).unwrap();
        let fresh = ModelState::init(micro_arch(), derive_seed(77, 1)).unwrap();
        let moved = report
            .state
            .params()
            .iter()
            .any(|(name, p)| p.data() != fresh.param(name).unwrap().data());
        assert!(moved);
        assert_eq!(report.log.len(), 2);
        assert!(report.log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn input_space_robust_training_runs() {
        let ds = micro_dataset();
        let mut config = micro_config(2);
        config.robust.space = FgsmSpace::Input;
        config.robust.epsilon = 0.1;
        let report = train(&ds, &micro_arch(), &config).unwrap();
        assert!(report.aborted.is_none());
        assert_eq!(report.log.len(), 2);
    }

    #[test]
    fn pure_clean_mix_ignores_perturbation_knobs() {
        // With all weight on the clean stream the adversarial and gaussian
        // machinery must never run, whatever epsilon and sigma say.
        let ds = micro_dataset();
        let mut plain = micro_config(3);
        plain.robust.mix = [1.0, 0.0, 0.0];
        plain.robust.epsilon = 0.0;
        plain.robust.sigma = 0.0;
        let mut knobs = micro_config(3);
        knobs.robust.mix = [1.0, 0.0, 0.0];
        knobs.robust.epsilon = 0.3;
        knobs.robust.sigma = 0.5;
        let a = train(&ds, &micro_arch(), &plain).unwrap();
        let b = train(&ds, &micro_arch(), &knobs).unwrap();
        assert_eq!(a.log, b.log);
        for (name, p) in a.state.params() {
            assert_eq!(p.data(), b.state.param(name).unwrap().data());
        }
    }

    #[test]
    fn stream_losses_combine_with_mix_weights() {
        // sigma = 0 makes the gaussian stream identical to the clean stream,
        // so a (1/2, 0, 1/2) mix must log the same rows as pure clean.
        // lambda2 = 0 because reparameterization noise is drawn per stream.
        let ds = micro_dataset();
        let mut clean = micro_config(2);
        clean.robust.mix = [1.0, 0.0, 0.0];
        clean.robust.sigma = 0.0;
        clean.weights.lambda2 = 0.0;
        let mut split = micro_config(2);
        split.robust.mix = [0.5, 0.0, 0.5];
        split.robust.sigma = 0.0;
        split.weights.lambda2 = 0.0;
        let a = train(&ds, &micro_arch(), &clean).unwrap();
        let b = train(&ds, &micro_arch(), &split).unwrap();
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert!((ra.total - rb.total).abs() < 1e-9, "{} vs {}", ra.total, rb.total);
            assert!((ra.acc - rb.acc).abs() < 1e-9);
        }
    }

    #[test]
    fn divergent_lr_aborts_with_last_good_state() {
        let ds = micro_dataset();
        let mut config = micro_config(60);
        config.lr = 1e9;
        let report = train(&ds, &micro_arch(), &config).unwrap();
        let aborted = report.aborted.expect("lr 1e9 must diverge");
        assert!(aborted.contains("episode"), "message names the episode: {aborted}");
        // The returned parameters are the last that produced finite values.
        assert!(report
            .state
            .params()
            .values()
            .all(|p| p.data().iter().all(|v| v.is_finite())));
        assert!(report.log.len() < 60);
    }

    #[test]
    fn log_csv_round_trips_through_disk() {
        let rows = vec![
            LogRow {
                episode: 0,
                total: 1.25,
                cce: 0.5,
                hesim: 0.75,
                rec: 0.1,
                prior: 0.002,
                acc: 0.5,
            },
            LogRow {
                episode: 1,
                total: 1.0,
                cce: 0.4,
                hesim: 0.6,
                rec: 0.09,
                prior: 0.001,
                acc: 0.75,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("episode,total,cce,hesim,rec,prior,acc"));
        assert_eq!(lines.next(), Some("0,1.25,0.5,0.75,0.1,0.002,0.5"));
        assert_eq!(lines.next(), Some("1,1,0.4,0.6,0.09,0.001,0.75"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn checkpoint_of_trained_state_round_trips() {
        let ds = micro_dataset();
        let report = train(&ds, &micro_arch(), &micro_config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.anrc");
        save_checkpoint(&report.state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (name, p) in report.state.params() {
            let b = back.param(name).unwrap();
            for (&x, &y) in p.data().iter().zip(b.data()) {
                assert_eq!(x as f32, y as f32);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = micro_dataset();
        let mut bad = micro_config(1);
        bad.n_way = 1;
        assert!(train(&ds, &micro_arch(), &bad).is_err());
        let mut bad = micro_config(1);
        bad.lr = 0.0;
        assert!(train(&ds, &micro_arch(), &bad).is_err());
        let mut bad = micro_config(1);
        bad.robust.mix = [0.9, 0.9, 0.9];
        assert!(train(&ds, &micro_arch(), &bad).is_err());
    }
}
