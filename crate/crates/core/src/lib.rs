//! Differentiable simulation of short-exposure camera bursts.
//!
//! The crate models how a moving camera turns scene irradiance into
//! quantized raw frames, parametrizes the burst's exposure schedule with a
//! softmax over trainable logits, and reconstructs a sharp image from the
//! burst. Every stage records onto a reverse-mode [`tape`] so the
//! reconstruction loss can be differentiated all the way back to the
//! exposure logits.
//!
//! Modules, bottom up:
//!
//! - [`tape`]: the differentiation engine, including reparametrized
//!   Gaussian and relaxed Poisson samplers.
//! - [`sensor`]: photon flux, exposure integration, shot/read noise,
//!   response curve and quantization.
//! - [`schedule`]: exposure budget, softmax schedule and validation.
//! - [`scene`]: procedural scenes, rotational camera shake and dense
//!   irradiance sequences.
//! - [`reconstruct`]: normalization, alignment, kernel prediction, merges,
//!   losses and image metrics.
//! - [`trainer`]: Adam, temperature annealing, the training loop, the
//!   exhaustive exposure oracle and evaluation.
//! - [`config`] and [`io`]: configuration files, PGM/JSON/CSV output.

pub mod config;
pub mod error;
pub mod io;
pub mod reconstruct;
pub mod scene;
pub mod schedule;
pub mod sensor;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
