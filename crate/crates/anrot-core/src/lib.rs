//! Episodic few-shot learning on diagonal-Gaussian embeddings.
//!
//! Images are encoded into diagonal Gaussians `N(mu, diag(var))`; classes are
//! summarized by Gaussian prototypes; classification, contrastive training,
//! and the variational prior penalty all run on the closed-form Hellinger
//! distance between such Gaussians. Robustness comes from training on batches
//! augmented with single-step sign-method adversaries and Gaussian noise.
//!
//! Layout:
//! - [`tensor`], [`graph`]: dense `f64` tensors and the reverse-mode tape.
//! - [`gauss`]: closed-form distances between diagonal Gaussians.
//! - [`variational`]: reparameterized sampling and prior penalties.
//! - [`net`]: the attention encoder/decoder pair and checkpoint I/O.
//! - [`robust`]: FGSM and Gaussian batch augmentation.
//! - [`episode`]: datasets, episode sampling, losses, training, evaluation.
//! - [`metrics`]: robustness sweeps, FID, and class-activation heatmaps.

pub mod error;
pub mod gauss;
pub mod gradcheck;
pub mod graph;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod variational;

pub mod net;

pub mod episode;
pub mod metrics;
pub mod robust;

pub use error::{Error, Result};
