//! Laboratory for latent point collapse in small dense classifiers.
//!
//! Training a classifier under cross-entropy plus a strongly ramped L2
//! penalty on the penultimate latents drives every sample of a class onto a
//! single point, all classes at a common distance from the origin. This
//! crate trains such models from scratch (own tensor type, reverse-mode
//! tape, AdamW), measures the collapse with a battery of geometry metrics,
//! probes robustness with an input-space attack, and ships a small
//! gradient-flow simulator that shows the same dynamics on a frozen
//! classifier.
//!
//! The `lpc` binary drives experiments from line-oriented config files; see
//! the harness module for the run protocol and output formats.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod robustness;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
