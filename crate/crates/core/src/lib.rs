//! CerfGAN: unsupervised multi-domain image-to-image translation built around a
//! multi-class discriminator (MCD) that doubles as the frozen encoder for the
//! decoder.
//!
//! The crate is organized by subsystem:
//!
//! - [`domain`] — domain registries, one-hot / multi-hot labels, and the
//!   zero-padded label block that conditions the decoder at the bottleneck.
//! - [`ops`] — the numeric kernels (conv / transposed conv forward and
//!   backward, GEMM helpers, reductions). Data-parallel with a sequential
//!   fallback behind the `parallel` feature; both paths use the same fixed
//!   work decomposition so results are bit-identical.
//! - [`nn`] — parameters, layers (conv, deconv, batch/instance norm, linear)
//!   with explicit forward caches and hand-written backward passes.
//! - [`networks`] — the MCD encoder + adversarial head and the up-sampling
//!   decoder, plus whole-image translation.
//! - [`losses`] — adversarial, reconstruction, classification, and WGAN-GP
//!   objectives with analytic gradients.
//! - [`data`] — folder datasets, augmentation, synthetic toy translation
//!   corpora, and an IDX-format digit reader/generator.
//! - [`train`] — the alternating two-phase optimization loop with strict
//!   freeze discipline, schedules, checkpointing, and CSV metric logging.
//! - [`baselines`] — StarGAN, StarGAN-MCD, and the conditional MLP GAN used
//!   by the ablations, plus the identity-failure probe.
//! - [`infer`] / [`report`] — file-level translation, fully convolutional
//!   high-resolution inference, sample grids, parameter reports, and loss
//!   stability analytics.
//! - [`experiment`] — the TOML experiment configuration, dotted-path
//!   overrides, and the run-directory entry points used by the CLI.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod domain;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod font;
pub mod infer;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ops;
pub mod report;
pub mod train;

pub use error::{Error, Result};
