//! Interpretable band-power convolutional networks for EEG classification.
//!
//! The crate implements the ShallowNet → xEEGNet family of compact
//! convolutional classifiers as an explicit computation graph with analytic
//! gradients, plus the experimental apparatus around it:
//!
//! - [`signal_io`]: recordings, windowing, z-scoring, manifests and a
//!   synthetic generator with planted band-power profiles.
//! - [`filterbank`]: linear-phase FIR kernels for the seven EEG bands.
//! - [`model`]: architecture presets, parameters and the forward pass with
//!   every intermediate retained.
//! - [`training`]: cross entropy, reverse-mode gradients, Adam, exponential
//!   learning-rate decay and early stopping.
//! - [`evaluation`]: nested leave-N-subjects-out split plans and metrics.
//! - [`spectral`]: Welch PSD and channel-averaged band powers in dB.
//! - [`analysis`]: logit-space separability, Pearson/Holm screening,
//!   stepwise OLS with VIF pruning, multinomial logistic regression and
//!   weight diagnostics.
//! - [`experiment`]: declarative end-to-end runs used by the CLI.
//!
//! All numerics run in `f64`. Checkpoints store tensors as little-endian
//! `f32`.

pub mod analysis;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod filterbank;
pub mod model;
pub mod rng;
pub mod signal_io;
pub mod spectral;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use filterbank::{Band, BandSpec, FirKernel};
pub use model::{Activations, Mode, ModelConfig, ModelParams, Pooling, Preset};
pub use signal_io::{EegWindow, Label, Recording};
pub use training::{TrainConfig, TrainTrace};
