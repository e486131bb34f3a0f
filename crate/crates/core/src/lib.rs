//! Contrastive guidance for score-based diffusion over analytic Gaussian-mixture worlds.
//!
//! The crate is organized bottom-up:
//!
//! - [`schedule`] and [`sampler`]: the VP forward process and reverse-time samplers.
//! - [`world`]: prompt-conditioned Gaussian mixtures with exact perturbed scores.
//! - [`guidance`]: classifier-free, negative and contrastive score algebra.
//! - [`density`]: probability-flow-ODE log-densities and ODE-estimated λ.
//! - [`editing`]: SDEdit and cycle-consistent encode/decode.
//! - [`analysis`]: shared-noise displacement, λ sweeps and distributional metrics.
//! - [`learned`]: a small MLP score network trained by denoising score matching.
//! - [`pipeline`]: the expert-plus-generalist guidance experiment.
//! - [`verify`]: the acceptance checks run by `contrastive verify`.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod density;
pub mod editing;
pub mod error;
pub mod guidance;
pub mod learned;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod verify;
pub mod world;

pub use error::{Error, Result};

/// Column vector of `f64`, the state type throughout.
pub type Vector = nalgebra::DVector<f64>;
